//! Atomic file output, run manifests and SVG rendering.

use scenematch::assignment::Match;
use scenematch::synth::SyntheticPair;
use scenematch::visibility::VisibilityPrediction;
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(format!(".tmp-{}", std::process::id()));
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })
}

pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    format!("{:x}", Sha256::digest(bytes))
}

/// Everything needed to replay a command.
pub struct RunManifest {
    pub command: String,
    pub config: String,
    pub seed: Option<u64>,
    pub dataset_hash: Option<String>,
    pub checkpoint_hash: Option<String>,
    pub wall_clock: Duration,
}

impl RunManifest {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            config: String::new(),
            seed: None,
            dataset_hash: None,
            checkpoint_hash: None,
            wall_clock: Duration::ZERO,
        }
    }

    pub fn render(&self) -> String {
        let started = SystemTime::now().duration_since(UNIX_EPOCH).unwrap_or_default();
        let mut s = String::new();
        let _ = writeln!(s, "command={}", self.command);
        let _ = writeln!(s, "tool_version={}", env!("CARGO_PKG_VERSION"));
        if let Some(seed) = self.seed {
            let _ = writeln!(s, "seed={seed}");
        }
        if let Some(h) = &self.dataset_hash {
            let _ = writeln!(s, "dataset_sha256={h}");
        }
        if let Some(h) = &self.checkpoint_hash {
            let _ = writeln!(s, "checkpoint_sha256={h}");
        }
        let _ = writeln!(s, "wall_clock_s={:.3}", self.wall_clock.as_secs_f64());
        let _ = writeln!(s, "finished_unix_s={}", started.as_secs());
        s.push_str("[config]\n");
        s.push_str(&self.config);
        s
    }
}

fn svg_header(s: &mut String, pair: &SyntheticPair) -> (f64, f64) {
    let (w, h) = (pair.source.image_size.width, pair.source.image_size.height.max(pair.target.image_size.height));
    let gap = 20.0;
    let total = w + gap + pair.target.image_size.width;
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{h}" viewBox="0 0 {total} {h}">"#);
    let _ = writeln!(s, r##"<rect x="0" y="0" width="{w}" height="{}" fill="#f4f4f4" stroke="#888"/>"##, pair.source.image_size.height);
    let _ = writeln!(
        s,
        r##"<rect x="{}" y="0" width="{}" height="{}" fill="#f4f4f4" stroke="#888"/>"##,
        w + gap,
        pair.target.image_size.width,
        pair.target.image_size.height
    );
    (0.0, w + gap)
}

/// Two images side by side, keypoints coloured by predicted visibility
/// (grey when none is given), and one segment per match.
pub fn render_svg(pair: &SyntheticPair, matches: &[Match], vis: Option<(&VisibilityPrediction, &VisibilityPrediction)>) -> String {
    let mut s = String::new();
    let offsets = svg_header(&mut s, pair);
    for m in matches {
        let (a, b) = (pair.source.point(m.source), pair.target.point(m.target));
        let _ = writeln!(
            s,
            r##"<line class="match" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#1f77b4" stroke-opacity="{:.3}"/>"##,
            a[0] + offsets.0,
            a[1],
            b[0] + offsets.1,
            b[1],
            m.confidence.clamp(0.2, 1.0)
        );
    }
    for (side, kps, offset) in [(0, &pair.source, offsets.0), (1, &pair.target, offsets.1)] {
        let pred = vis.map(|(a, b)| if side == 0 { a } else { b });
        for k in 0..kps.len() {
            let p = kps.point(k);
            let color = match pred {
                Some(v) if v.is_visible(k) => "#2ca02c",
                Some(_) => "#d62728",
                None => "#555555",
            };
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, p[0] + offset, p[1]);
        }
    }
    s.push_str("</svg>\n");
    s
}
