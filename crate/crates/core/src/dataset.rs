//! `SGPAIR1` dataset files: a header then one length-prefixed record per pair.
//!
//! Labels are not stored; they are recomputed from the homography and
//! coordinates on load with the threshold recorded in the header.

use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::geometry::{compute_groundtruth, Homography};
use crate::keypoints::{ImageSize, KeypointSet, SCALE_COUNT};
use crate::synth::SyntheticPair;

pub const DATASET_MAGIC: &[u8; 8] = b"SGPAIR1\0";
pub const DATASET_VERSION: u32 = 1;

fn write_keypoints(w: &mut Writer, k: &KeypointSet) {
    w.f64(k.image_size.width);
    w.f64(k.image_size.height);
    w.tensor(&k.positions);
    w.u32(k.raw_features.len() as u32);
    k.raw_features.iter().for_each(|f| w.tensor(f));
}

fn read_keypoints(r: &mut Reader) -> Result<KeypointSet> {
    let image_size = ImageSize::new(r.f64()?, r.f64()?);
    let positions = r.tensor()?;
    let scales = r.u32()? as usize;
    if scales != SCALE_COUNT {
        return Err(Error::Format(format!("{scales} feature scales, expected {SCALE_COUNT}")));
    }
    let raw_features = (0..scales).map(|_| r.tensor()).collect::<Result<Vec<_>>>()?;
    let k = KeypointSet { positions, raw_features, image_size };
    k.validate().map_err(|e| Error::Format(format!("invalid keypoints: {e}")))?;
    Ok(k)
}

/// Serialises `pairs`, labelled at `reproj_threshold`.
pub fn encode_dataset(pairs: &[SyntheticPair], reproj_threshold: f64) -> Vec<u8> {
    let mut w = Writer::default();
    w.bytes(DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.f64(reproj_threshold);
    w.u64(pairs.len() as u64);
    for p in pairs {
        let mut rec = Writer::default();
        p.homography.to_rows().iter().flatten().for_each(|&v| rec.f64(v));
        write_keypoints(&mut rec, &p.source);
        write_keypoints(&mut rec, &p.target);
        w.u64(rec.buf.len() as u64);
        w.bytes(&rec.buf);
    }
    w.buf
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Vec<SyntheticPair>> {
    let mut r = Reader::new(bytes);
    r.expect_magic(DATASET_MAGIC)?;
    let version = r.u32()?;
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("dataset version {version}, expected {DATASET_VERSION}")));
    }
    let threshold = r.f64()?;
    let count = r.len(8)?;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.len(1)?;
        let mut rec = Reader::new(r.take(len)?);
        let mut rows = [[0.0; 3]; 3];
        for v in rows.iter_mut().flatten() {
            *v = rec.f64()?;
        }
        let homography = Homography::from_rows(rows)?;
        let source = read_keypoints(&mut rec)?;
        let target = read_keypoints(&mut rec)?;
        if !rec.is_empty() {
            return Err(Error::Format("trailing bytes in pair record".into()));
        }
        let gt = compute_groundtruth(&source, &target, &homography, threshold)?;
        pairs.push(SyntheticPair { source, target, homography, gt });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after the last record".into()));
    }
    Ok(pairs)
}
