use crate::args::{Cli, Command, EvalArgs, GenArgs, InspectArgs, MatchArgs, SynthArgs, TrainArgs};
use crate::output::{render_svg, sha256_hex, sidecar, write_atomic, RunManifest};
use scenematch::checkpoint::{decode_checkpoint, encode_checkpoint};
use scenematch::dataset::{decode_dataset, encode_dataset};
use scenematch::eval::{evaluate_baseline, evaluate_model, BaselineKind};
use scenematch::keypoints::ImageSize;
use scenematch::model::ModelConfig;
use scenematch::synth::{dataset_stream, SynthConfig, SyntheticPair};
use scenematch::training::{DataSource, TrainConfig, TrainState, LOG_HEADER};
use scenematch::Error;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

#[derive(Debug)]
pub enum Failure {
    /// Bad or missing flag; exit code 1.
    Usage(String),
    /// Anything that went wrong while running; exit code 2.
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type Outcome = Result<(), Failure>;

pub fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Gen(a) => gen(a),
        Command::Train(a) => train(a),
        Command::Match(a) => match_pair(a),
        Command::Eval(a) => eval(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn write(path: &Path, bytes: &[u8]) -> Outcome {
    write_atomic(path, bytes).map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Reads a file named by `flag`; a missing file is a usage error naming the flag.
fn read_input(path: &Path, flag: &str) -> Result<Vec<u8>, Failure> {
    if !path.is_file() {
        return Err(Failure::Usage(format!("{flag}: no such file {}", path.display())));
    }
    fs::read(path).map_err(|e| Failure::Runtime(format!("cannot read {}: {e}", path.display())))
}

fn require<'a>(value: &'a Option<std::path::PathBuf>, flag: &str) -> Result<&'a Path, Failure> {
    value.as_deref().ok_or_else(|| Failure::Usage(format!("the {flag} flag is required")))
}

fn synth_config(a: &SynthArgs, scale_dims: [usize; 4]) -> Result<SynthConfig, Failure> {
    let cfg = SynthConfig {
        source_count: a.source_count,
        target_count: a.target_count,
        image_size: ImageSize::new(a.image_width, a.image_height),
        corner_jitter: a.jitter,
        descriptor_noise: a.noise,
        distractor_frac: a.distractors,
        drop_frac: a.drop,
        photometric_bias: a.photometric_bias,
        reproj_threshold: a.reproj_threshold,
        scale_dims,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(cfg)
}

fn synth_text(cfg: &SynthConfig) -> String {
    format!(
        "source_count={}\ntarget_count={}\nimage_size={}x{}\ncorner_jitter={}\ndescriptor_noise={}\nscale_noise_gain={:?}\n\
         distractor_frac={}\ndrop_frac={}\nscale_dims={:?}\nphotometric_bias={}\nreproj_threshold={}\nmin_separation={}\n",
        cfg.source_count,
        cfg.target_count,
        cfg.image_size.width,
        cfg.image_size.height,
        cfg.corner_jitter,
        cfg.descriptor_noise,
        cfg.scale_noise_gain,
        cfg.distractor_frac,
        cfg.drop_frac,
        cfg.scale_dims,
        cfg.photometric_bias,
        cfg.reproj_threshold,
        cfg.min_separation
    )
}

fn gen(a: GenArgs) -> Outcome {
    let start = Instant::now();
    if a.pairs == 0 {
        return Err(Failure::Usage("--pairs must be at least 1".into()));
    }
    let cfg = synth_config(&a.synth, SynthConfig::default().scale_dims)?;
    let pairs: Vec<SyntheticPair> = dataset_stream(&cfg, a.seed, a.pairs).collect::<Result<_, _>>()?;
    let bytes = encode_dataset(&pairs, cfg.reproj_threshold);
    write(&a.out, &bytes)?;

    let mut m = RunManifest::new("gen");
    m.seed = Some(a.seed);
    m.config = format!(
        "pairs={}\n{}note=synthetic stand-in for detected keypoints on real images\nvisible_class=0\n",
        a.pairs,
        synth_text(&cfg)
    );
    m.dataset_hash = Some(sha256_hex(&bytes));
    m.wall_clock = start.elapsed();
    write(&sidecar(&a.out, ".manifest"), m.render().as_bytes())?;
    println!("wrote {} pairs to {}", pairs.len(), a.out.display());
    Ok(())
}

fn load_pairs(path: &Path) -> Result<(Vec<SyntheticPair>, String), Failure> {
    let bytes = read_input(path, "--data")?;
    let pairs = decode_dataset(&bytes)?;
    Ok((pairs, sha256_hex(&bytes)))
}

fn train(a: TrainArgs) -> Outcome {
    let start = Instant::now();
    let mut state = match &a.resume {
        Some(path) => decode_checkpoint(&read_input(path, "--resume")?)?,
        None => {
            let cfg = TrainConfig {
                model: ModelConfig { width: a.channels, layers: a.layers, heads: a.heads, ..ModelConfig::default() },
                batch_size: a.batch_size,
                base_lr: a.lr,
                warmup_steps: a.warmup,
                total_steps: a.steps,
                alpha: a.alpha,
                weight_decay: a.weight_decay,
                seed: a.seed,
                sinkhorn_iters: a.sinkhorn_iters,
                threshold: a.threshold,
                clip_norm: a.clip,
            };
            TrainState::new(cfg).map_err(|e| Failure::Usage(e.to_string()))?
        }
    };
    let mut manifest = RunManifest::new("train");
    let data = match &a.data {
        Some(path) => {
            let (pairs, hash) = load_pairs(path)?;
            manifest.dataset_hash = Some(hash);
            DataSource::Fixed(pairs)
        }
        None => {
            let cfg = synth_config(&a.synth, state.config.model.scale_dims)?;
            manifest.config.push_str(&format!("[stream]\n{}", synth_text(&cfg)));
            DataSource::Stream { config: cfg, seed: state.config.seed }
        }
    };

    let log_path = a.log.clone().unwrap_or_else(|| sidecar(&a.out, ".log.csv"));
    let mut log = resumed_log(&log_path, state.step);
    let stop = a.stop_after.unwrap_or(usize::MAX).min(state.config.total_steps);
    let mut outcome = Ok(());
    while state.step < stop {
        match state.train_step(&data) {
            Ok(stats) => {
                let _ = writeln!(log, "{}", stats.csv_row());
                if a.checkpoint_every > 0 && stats.step % a.checkpoint_every == 0 {
                    write(&a.out, &encode_checkpoint(&state))?;
                }
            }
            Err(e) => {
                outcome = Err(Failure::Runtime(format!(
                    "training aborted at step {}: {e}; last checkpoint kept at {}",
                    state.step + 1,
                    a.out.display()
                )));
                break;
            }
        }
    }
    write(&log_path, log.as_bytes())?;
    outcome?;

    let ckpt = encode_checkpoint(&state);
    write(&a.out, &ckpt)?;
    manifest.seed = Some(state.config.seed);
    manifest.checkpoint_hash = Some(sha256_hex(&ckpt));
    manifest.config.insert_str(0, &state.config.to_text());
    manifest.wall_clock = start.elapsed();
    write(&sidecar(&a.out, ".manifest"), manifest.render().as_bytes())?;
    println!("trained to step {} -> {}", state.step, a.out.display());
    Ok(())
}

/// Log rows up to `step` from a previous run, so a resumed log matches an
/// uninterrupted one.
fn resumed_log(path: &Path, step: usize) -> String {
    let mut out = format!("{LOG_HEADER}\n");
    if step == 0 {
        return out;
    }
    if let Ok(old) = fs::read_to_string(path) {
        for line in old.lines().skip(1) {
            match line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
                Some(k) if k <= step => {
                    out.push_str(line);
                    out.push('\n');
                }
                _ => break,
            }
        }
    }
    out
}

fn load_model(path: &Option<std::path::PathBuf>) -> Result<(TrainState, String), Failure> {
    let path = require(path, "--checkpoint")?;
    let bytes = read_input(path, "--checkpoint")?;
    let state = decode_checkpoint(&bytes).map_err(|e| Failure::Runtime(format!("corrupt checkpoint {}: {e}", path.display())))?;
    Ok((state, sha256_hex(&bytes)))
}

fn select_pair(pairs: &[SyntheticPair], index: usize) -> Result<&SyntheticPair, Failure> {
    pairs
        .get(index)
        .ok_or_else(|| Failure::Usage(format!("--pair {index} is out of range; the dataset has {} pairs", pairs.len())))
}

fn match_pair(a: MatchArgs) -> Outcome {
    let start = Instant::now();
    let (state, ckpt_hash) = load_model(&a.checkpoint)?;
    let (pairs, data_hash) = load_pairs(&a.data)?;
    let pair = select_pair(&pairs, a.pair)?;
    let pred = state.model.predict(&pair.source, &pair.target, a.sinkhorn_iters, a.threshold)?;

    let mut csv = String::from("i,j,u_s,v_s,u_t,v_t,confidence\n");
    for m in &pred.matches {
        let (s, t) = (pair.source.point(m.source), pair.target.point(m.target));
        let _ = writeln!(csv, "{},{},{},{},{},{},{}", m.source, m.target, s[0], s[1], t[0], t[1], m.confidence);
    }
    write(&a.out, csv.as_bytes())?;
    if let Some(svg) = &a.svg {
        write(svg, render_svg(pair, &pred.matches, None).as_bytes())?;
    }
    let mut m = RunManifest::new("match");
    m.config = format!("pair={}\nthreshold={}\nsinkhorn_iters={}\n", a.pair, a.threshold, a.sinkhorn_iters);
    m.dataset_hash = Some(data_hash);
    m.checkpoint_hash = Some(ckpt_hash);
    m.wall_clock = start.elapsed();
    write(&sidecar(&a.out, ".manifest"), m.render().as_bytes())?;
    println!("{} matches -> {}", pred.matches.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Outcome {
    let start = Instant::now();
    let baseline = a
        .baseline
        .as_deref()
        .map(|b| b.parse::<BaselineKind>().map_err(|e| Failure::Usage(format!("--baseline: {e}"))))
        .transpose()?;
    if baseline.is_some() && a.checkpoint.is_some() {
        return Err(Failure::Usage("--checkpoint and --baseline cannot be combined".into()));
    }
    let mut m = RunManifest::new("eval");
    let (pairs, data_hash) = load_pairs(&a.data)?;
    let report = match baseline {
        Some(kind) => {
            m.config = format!("baseline={}\n", a.baseline.as_deref().unwrap_or_default());
            evaluate_baseline(kind, &pairs)?
        }
        None => {
            let (state, hash) = load_model(&a.checkpoint)?;
            m.checkpoint_hash = Some(hash);
            m.config = format!("threshold={}\nsinkhorn_iters={}\n", a.threshold, a.sinkhorn_iters);
            evaluate_model(&state.model, &pairs, a.sinkhorn_iters, a.threshold)?
        }
    };
    write(&a.out, report.to_json_text().as_bytes())?;
    write(&sidecar(&a.out, ".mma.csv"), report.to_csv().as_bytes())?;
    m.dataset_hash = Some(data_hash);
    m.wall_clock = start.elapsed();
    write(&sidecar(&a.out, ".manifest"), m.render().as_bytes())?;
    print!("{}", report.to_json_text());
    Ok(())
}

fn inspect(a: InspectArgs) -> Outcome {
    let start = Instant::now();
    let (state, ckpt_hash) = load_model(&a.checkpoint)?;
    let (pairs, data_hash) = load_pairs(&a.data)?;
    let pair = select_pair(&pairs, a.pair)?;
    let pred = state.model.predict(&pair.source, &pair.target, a.sinkhorn_iters, a.threshold)?;

    let mut csv = String::from("kind,image,index,u,v,p_visible,target_index,confidence\n");
    for (image, kps, vis) in [("source", &pair.source, &pred.vis_s), ("target", &pair.target, &pred.vis_t)] {
        for k in 0..kps.len() {
            let p = kps.point(k);
            let _ = writeln!(csv, "keypoint,{image},{k},{},{},{},,", p[0], p[1], vis.p_visible(k));
        }
    }
    for m in &pred.matches {
        let p = pair.source.point(m.source);
        let _ = writeln!(csv, "match,source,{},{},{},,{},{}", m.source, p[0], p[1], m.target, m.confidence);
    }
    write(&a.csv, csv.as_bytes())?;
    write(&a.svg, render_svg(pair, &pred.matches, Some((&pred.vis_s, &pred.vis_t))).as_bytes())?;
    let mut m = RunManifest::new("inspect");
    m.config = format!("pair={}\nthreshold={}\nsinkhorn_iters={}\n", a.pair, a.threshold, a.sinkhorn_iters);
    m.dataset_hash = Some(data_hash);
    m.checkpoint_hash = Some(ckpt_hash);
    m.wall_clock = start.elapsed();
    write(&sidecar(&a.csv, ".manifest"), m.render().as_bytes())?;
    println!("{} keypoints, {} matches -> {}", pair.source.len() + pair.target.len(), pred.matches.len(), a.svg.display());
    Ok(())
}
