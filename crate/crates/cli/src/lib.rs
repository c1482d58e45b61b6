//! Command implementations behind the `sdflow` binary. Every command
//! resolves its configuration (flag > config file > default), writes a run
//! manifest into the output directory before doing any work, and emits
//! plot-ready CSV plus JSON reports.

use sdflow_core::ckpt::Checkpoint;
use sdflow_core::config::ExperimentConfig;
use sdflow_core::data::{read_csv_matrix, windows_from_csv, windows_to_csv, WindowedDataset};
use sdflow_core::error::{Result, SdError};
use sdflow_core::flow::{train_flow, FlowConfig, FlowPipeline, PriorKind, TimeDist};
use sdflow_core::lab;
use sdflow_core::metrics;
use sdflow_core::tensor::Tensor;
use sdflow_core::vq::{train_vqvae, Tokenizer, VqConfig};
use std::path::{Path, PathBuf};

pub fn code_version() -> String {
    match option_env!("SDFLOW_GIT_HASH") {
        Some(h) => format!("{}+{h}", env!("CARGO_PKG_VERSION")),
        None => env!("CARGO_PKG_VERSION").to_string(),
    }
}

/// Resolve threads from flag or SDFLOW_THREADS and configure the global
/// worker pool (first call wins).
pub fn init_threads(flag: Option<usize>) {
    let n = flag.or_else(|| {
        std::env::var("SDFLOW_THREADS").ok().and_then(|v| v.parse().ok())
    });
    if let Some(n) = n {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Built-in defaults for every documented key.
pub fn default_config() -> ExperimentConfig {
    let mut c = ExperimentConfig::new();
    c.set("data.kind", "sines");
    c.set("data.n", 2000);
    c.set("data.seq_len", 24);
    c.set("data.features", 5);
    c.set("data.stride", 1);
    c.set("data.heldout_fraction", 0.2);
    let vq = VqConfig::desk_sines();
    c.set("vq.downsample", vq.downsample);
    c.set("vq.codebook_size", vq.codebook_size);
    c.set("vq.code_dim", vq.code_dim);
    c.set("vq.hidden", vq.hidden);
    c.set("vq.res_blocks", vq.res_blocks);
    c.set("vq.kernel", vq.kernel);
    c.set("vq.lambda_embed", vq.lambda_embed);
    c.set("vq.ema_decay", vq.ema_decay);
    c.set("vq.reset_threshold", vq.reset_threshold);
    c.set("vq.epochs", vq.epochs);
    c.set("vq.batch", vq.batch);
    c.set("vq.lr", vq.lr);
    c.set("vq.lr_decay", vq.lr_decay);
    c.set("vq.target_mse", vq.target_mse);
    let fl = FlowConfig::desk_sines();
    c.set("flow.d_model", fl.d_model);
    c.set("flow.layers", fl.layers);
    c.set("flow.heads", fl.heads);
    c.set("flow.rank", fl.rank);
    c.set("flow.lambda_mu", fl.lambda_mu);
    c.set("flow.lambda_sigma", fl.lambda_sigma);
    c.set("flow.tau_train", fl.tau_train);
    c.set("flow.tau_infer", fl.tau_infer);
    c.set("flow.ode_steps", fl.ode_steps);
    c.set("flow.time_dist", fl.time_dist);
    c.set("flow.t_clamp", fl.t_clamp);
    c.set("flow.alpha", fl.alpha);
    c.set("flow.prior", fl.prior);
    c.set("flow.global_norm", fl.global_norm);
    c.set("flow.train_steps", fl.train_steps);
    c.set("flow.batch", fl.batch);
    c.set("flow.lr_net", fl.lr_net);
    c.set("flow.lr_uv", fl.lr_uv);
    c.set("eval.n", 400);
    c.set("eval.seeds", 5);
    c.set("ablate.ranks", "2,8,32");
    c.set("ablate.alphas", "0.02,0.1,0.5");
    c.set("ablate.steps", "10,20,50");
    c.set("ablate.fractions", "0.1,0.2,0.5,1.0");
    c
}

/// Layered resolution: defaults, then the config file, then CLI overrides.
pub fn resolve_config(file: Option<&Path>, overrides: &[(String, String)]) -> Result<ExperimentConfig> {
    let mut cfg = default_config();
    if let Some(path) = file {
        cfg.overlay(&ExperimentConfig::load(path)?);
    }
    for (k, v) in overrides {
        cfg.set(k, v);
    }
    Ok(cfg)
}

pub fn vq_config_from(cfg: &ExperimentConfig) -> Result<VqConfig> {
    Ok(VqConfig {
        seq_len: cfg.parsed("data.seq_len")?,
        features: cfg.parsed("data.features")?,
        downsample: cfg.parsed("vq.downsample")?,
        codebook_size: cfg.parsed("vq.codebook_size")?,
        code_dim: cfg.parsed("vq.code_dim")?,
        hidden: cfg.parsed("vq.hidden")?,
        res_blocks: cfg.parsed("vq.res_blocks")?,
        kernel: cfg.parsed("vq.kernel")?,
        lambda_embed: cfg.parsed("vq.lambda_embed")?,
        ema_decay: cfg.parsed("vq.ema_decay")?,
        reset_threshold: cfg.parsed("vq.reset_threshold")?,
        epochs: cfg.parsed("vq.epochs")?,
        batch: cfg.parsed("vq.batch")?,
        lr: cfg.parsed("vq.lr")?,
        lr_decay: cfg.parsed("vq.lr_decay")?,
        target_mse: cfg.parsed("vq.target_mse")?,
    })
}

pub fn flow_config_from(cfg: &ExperimentConfig) -> Result<FlowConfig> {
    Ok(FlowConfig {
        d_model: cfg.parsed("flow.d_model")?,
        layers: cfg.parsed("flow.layers")?,
        heads: cfg.parsed("flow.heads")?,
        rank: cfg.parsed("flow.rank")?,
        lambda_mu: cfg.parsed("flow.lambda_mu")?,
        lambda_sigma: cfg.parsed("flow.lambda_sigma")?,
        tau_train: cfg.parsed("flow.tau_train")?,
        tau_infer: cfg.parsed("flow.tau_infer")?,
        ode_steps: cfg.parsed("flow.ode_steps")?,
        time_dist: cfg.parsed::<TimeDist>("flow.time_dist")?,
        t_clamp: cfg.parsed("flow.t_clamp")?,
        alpha: cfg.parsed("flow.alpha")?,
        prior: cfg.parsed::<PriorKind>("flow.prior")?,
        global_norm: cfg.parsed("flow.global_norm")?,
        train_steps: cfg.parsed("flow.train_steps")?,
        batch: cfg.parsed("flow.batch")?,
        lr_net: cfg.parsed("flow.lr_net")?,
        lr_uv: cfg.parsed("flow.lr_uv")?,
    })
}

pub fn load_dataset(cfg: &ExperimentConfig, seed: u64) -> Result<WindowedDataset> {
    let kind: String = cfg.parsed("data.kind")?;
    let seq_len: usize = cfg.parsed("data.seq_len")?;
    let heldout: f64 = cfg.parsed("data.heldout_fraction")?;
    match kind.as_str() {
        "sines" => {
            let n: usize = cfg.parsed("data.n")?;
            let d: usize = cfg.parsed("data.features")?;
            let mut ds = WindowedDataset::gen_sines(n, seq_len, d, seed);
            ds.resplit(heldout, seed)?;
            Ok(ds)
        }
        "csv" => {
            let path: String = cfg.parsed("data.path")?;
            let stride: usize = cfg.parsed("data.stride")?;
            WindowedDataset::load_csv_windows(Path::new(&path), seq_len, stride, heldout, seed)
        }
        other => Err(SdError::Config(format!("unknown data.kind {other:?}"))),
    }
}

/// Run manifest, written before any command output.
pub fn write_manifest(
    out: &Path,
    command: &str,
    cfg: &ExperimentConfig,
    seed: u64,
    extra: &[(&str, String)],
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| SdError::Io(format!("{}: {e}", out.display())))?;
    let mut obj = serde_json::json!({
        "command": command,
        "seed": seed,
        "config_hash": format!("{:08x}", cfg.hash()),
        "code_version": code_version(),
        "wall_clock_unix": std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    });
    for (k, v) in extra {
        obj[k] = serde_json::Value::String(v.clone());
    }
    write_text(&out.join("manifest.json"), &serde_json::to_string_pretty(&obj).unwrap())?;
    write_text(&out.join("config.resolved"), &cfg.to_text())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| SdError::Io(format!("{}: {e}", path.display())))
}

pub fn cmd_train_vqvae(cfg: &ExperimentConfig, seed: u64, out: &Path) -> Result<PathBuf> {
    write_manifest(out, "train-vqvae", cfg, seed, &[])?;
    let ds = load_dataset(cfg, seed)?;
    let vq_cfg = vq_config_from(cfg)?;
    let (tok, log) = train_vqvae(&ds, &vq_cfg, seed)?;
    let ckpt_path = out.join("stage1.ckpt");
    tok.to_checkpoint().save(&ckpt_path)?;
    write_text(&out.join("vq_train_log.csv"), &log.to_csv())?;
    let last = log.epochs.last().expect("at least one epoch");
    println!(
        "stage-1 done: {} epochs, train mse {:.5}, utilization {:.3} -> {}",
        log.epochs.len(),
        last.recon_mse,
        last.utilization,
        ckpt_path.display()
    );
    Ok(ckpt_path)
}

pub fn cmd_train_flow(
    cfg: &ExperimentConfig,
    stage1: &Path,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    write_manifest(out, "train-flow", cfg, seed, &[("stage1", stage1.display().to_string())])?;
    let tok = Tokenizer::from_checkpoint(&Checkpoint::load(stage1)?)?;
    let ds = load_dataset(cfg, seed)?;
    if ds.seq_len != tok.config.seq_len || ds.features != tok.config.features {
        return Err(SdError::Config(format!(
            "dataset [{}, {}] does not match tokenizer [{}, {}]",
            ds.seq_len, ds.features, tok.config.seq_len, tok.config.features
        )));
    }
    let flow_cfg = flow_config_from(cfg)?;
    let anchors = ds.train_indices();
    let (pipeline, log) = train_flow(tok, &ds, &anchors, &flow_cfg, seed)?;
    let ckpt_path = out.join("stage2.ckpt");
    pipeline.to_checkpoint().save(&ckpt_path)?;
    write_text(&out.join("flow_train_log.csv"), &log.to_csv())?;
    let last = log.steps.last().expect("at least one step");
    println!(
        "stage-2 done: {} steps, final ce {:.4}, h {:.4} -> {}",
        log.steps.len(),
        last.ce,
        pipeline.prior.bandwidth,
        ckpt_path.display()
    );
    Ok(ckpt_path)
}

pub fn cmd_generate(
    cfg: &ExperimentConfig,
    stage2: &Path,
    n: usize,
    tau: Option<f64>,
    steps: Option<usize>,
    kde_only: bool,
    seed: u64,
    out: &Path,
) -> Result<PathBuf> {
    let pipeline = FlowPipeline::from_checkpoint(&Checkpoint::load(stage2)?)?;
    let tau = tau.unwrap_or(pipeline.config.tau_infer);
    let steps = if kde_only { 0 } else { steps.unwrap_or(pipeline.config.ode_steps) };
    let mut cfg = cfg.clone();
    cfg.set("generate.n", n);
    cfg.set("generate.tau", tau);
    cfg.set("generate.steps", steps);
    cfg.set("generate.mode", if kde_only { "kde_only" } else { "flow" });
    write_manifest(out, "generate", &cfg, seed, &[("stage2", stage2.display().to_string())])?;
    let gen = pipeline.generate(n, steps, tau, seed)?;
    let csv_path = out.join("generated.csv");
    write_text(&csv_path, &windows_to_csv(&gen.windows))?;
    // step-counter probe recorded next to the data
    let probe = serde_json::json!({
        "n": n,
        "steps": steps,
        "tau": tau,
        "velocity_evals": gen.velocity_evals,
    });
    write_text(&out.join("generate_stats.json"), &serde_json::to_string_pretty(&probe).unwrap())?;
    println!(
        "generated {} windows ({} velocity evaluations) -> {}",
        n,
        gen.velocity_evals,
        csv_path.display()
    );
    Ok(csv_path)
}

pub fn cmd_evaluate(
    cfg: &ExperimentConfig,
    stage2: &Path,
    synthetic_csv: &Path,
    seed: u64,
    out: &Path,
) -> Result<()> {
    write_manifest(out, "evaluate", cfg, seed, &[("synthetic", synthetic_csv.display().to_string())])?;
    let pipeline = FlowPipeline::from_checkpoint(&Checkpoint::load(stage2)?)?;
    let ds = load_dataset(cfg, seed)?;
    let synthetic = windows_from_csv(synthetic_csv)?;
    let report = metrics::evaluate_all(&ds, &synthetic, &pipeline.tokenizer, seed)?;
    let mut obj = serde_json::to_value(&report).unwrap();
    obj["config_hash"] = serde_json::json!(format!("{:08x}", cfg.hash()));
    obj["code_version"] = serde_json::json!(code_version());
    write_text(&out.join("report.json"), &serde_json::to_string_pretty(&obj).unwrap())?;
    let text = format!(
        "# {}\n# config {:08x}  code {}  seed {}\n\n{:<12} {:>10}\n{:<12} {:>10.5}\n{:<12} {:>10.5}\n{:<12} {:>10.5}\n{:<12} {:>10.5}\n",
        report.classifier,
        cfg.hash(),
        code_version(),
        seed,
        "metric",
        "value",
        "DS",
        report.ds,
        "PS",
        report.ps,
        "LFD",
        report.lfd,
        "copy_rate",
        report.copy_rate,
    );
    write_text(&out.join("report.txt"), &text)?;
    println!("{text}");
    Ok(())
}

pub fn cmd_forecast(
    cfg: &ExperimentConfig,
    stage2: &Path,
    history_csv: &Path,
    seed: u64,
    out: &Path,
) -> Result<()> {
    write_manifest(out, "forecast", cfg, seed, &[("history", history_csv.display().to_string())])?;
    let pipeline = FlowPipeline::from_checkpoint(&Checkpoint::load(stage2)?)?;
    let (_, rows) = read_csv_matrix(history_csv)?;
    let d = pipeline.tokenizer.config.features;
    if rows.is_empty() || rows[0].len() != d {
        return Err(SdError::Dim(format!("history must have {d} feature columns")));
    }
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    let history = Tensor::new(vec![rows.len(), d], flat)?;
    let window = pipeline.forecast(&history, seed)?;
    write_text(&out.join("forecast.csv"), &windows_to_csv(std::slice::from_ref(&window)))?;
    println!("forecast written ({} rows)", window.rows());
    Ok(())
}

// ── analyze ─────────────────────────────────────────────────────────────

pub fn cmd_analyze(
    cfg: &ExperimentConfig,
    which: &str,
    stage2: Option<&Path>,
    seed: u64,
    out: &Path,
) -> Result<()> {
    write_manifest(out, &format!("analyze-{which}"), cfg, seed, &[])?;
    match which {
        "transport" => analyze_transport(seed, out),
        "pinsker" => analyze_pinsker(seed, out),
        "kde-rate" => analyze_kde_rate(seed, out),
        "spectrum" => {
            let stage2 = stage2
                .ok_or_else(|| SdError::Config("analyze spectrum needs --stage2".into()))?;
            analyze_spectrum(cfg, stage2, seed, out)
        }
        other => Err(SdError::Config(format!("unknown analysis {other:?}"))),
    }
}

fn analyze_transport(seed: u64, out: &Path) -> Result<()> {
    let mut csv = String::from("experiment,dim,c_or_rank,h,eps,estimate,std_err,reference\n");
    let mut pass = true;

    for (dim, c) in [(256usize, 0.0f64), (512, 1.0)] {
        let est = lab::transport_gaussian(
            dim,
            move |rng| {
                if c == 0.0 {
                    vec![0.0; dim]
                } else {
                    // fixed-direction unit vector scaled to second moment c
                    let mut v = vec![0.0; dim];
                    v[0] = c.sqrt();
                    let _ = rng;
                    v
                }
            },
            100_000,
            seed,
        );
        let reference = dim as f64 + c;
        let ok = (est.mean - reference).abs() <= 3.0 * est.std_err;
        pass &= ok;
        csv.push_str(&format!(
            "gaussian,{dim},{c},,,{},{},{reference}\n",
            est.mean, est.std_err
        ));
    }

    let (rank, h, eps) = (16usize, 0.1f64, 0.05f64);
    let mut anchored_means = Vec::new();
    for dim in [128usize, 512, 2048] {
        let rep = lab::transport_anchored(dim, rank, h, eps, 30_000, seed);
        pass &= rep.estimate.mean <= rep.bound + 3.0 * rep.estimate.std_err;
        anchored_means.push(rep.estimate.mean);
        csv.push_str(&format!(
            "anchored,{dim},{rank},{h},{eps},{},{},{}\n",
            rep.estimate.mean, rep.estimate.std_err, rep.bound
        ));
    }
    for i in 0..anchored_means.len() {
        for j in (i + 1)..anchored_means.len() {
            let rel = (anchored_means[i] - anchored_means[j]).abs() / anchored_means[i];
            pass &= rel < 0.10;
        }
    }

    write_text(&out.join("transport.csv"), &csv)?;
    let summary = serde_json::json!({ "pass": pass, "anchored_means": anchored_means });
    write_text(&out.join("transport_summary.json"), &serde_json::to_string_pretty(&summary).unwrap())?;
    println!("transport analysis pass = {pass}");
    if pass {
        Ok(())
    } else {
        Err(SdError::Contract("transport invariants failed".into()))
    }
}

fn analyze_pinsker(seed: u64, out: &Path) -> Result<()> {
    let mut rng = sdflow_core::rng::stream(seed, 0xab1e);
    let mut violations = 0usize;
    for _ in 0..100_000 {
        let inst = lab::random_bound_instance(16, 2.0, &mut rng);
        if !lab::pinsker_check(&inst).holds {
            violations += 1;
        }
    }
    use rand::Rng;
    let weighted: Vec<(f64, lab::BoundInstance)> = (0..10_000)
        .map(|_| (rng.gen_range(0.0..0.95), lab::random_bound_instance(16, 2.0, &mut rng)))
        .collect();
    let vres = lab::velocity_bound_check(&weighted, 0.05);
    let pass = violations == 0 && vres.holds_all;
    let summary = serde_json::json!({
        "pass": pass,
        "pinsker_instances": 100_000,
        "pinsker_violations": violations,
        "velocity_instances": vres.n_instances,
        "velocity_mse": vres.velocity_mse,
        "velocity_bound": vres.bound,
    });
    write_text(&out.join("pinsker_summary.json"), &serde_json::to_string_pretty(&summary).unwrap())?;
    println!("pinsker analysis pass = {pass}");
    if pass {
        Ok(())
    } else {
        Err(SdError::Contract("pinsker invariants failed".into()))
    }
}

fn analyze_kde_rate(seed: u64, out: &Path) -> Result<()> {
    let ns = [100usize, 316, 1000, 3162, 10000];
    let mut csv = String::from("rank,seed,n,mise\n");
    let mut pass = true;
    let mut summaries = Vec::new();
    for rank in [1usize, 2] {
        let rep = lab::kde_rate_experiment(rank, &ns, 10, seed)?;
        for (s, row) in rep.mise.iter().enumerate() {
            for (i, &m) in row.iter().enumerate() {
                csv.push_str(&format!("{rank},{s},{},{m}\n", ns[i]));
            }
        }
        let ok = (rep.mean_slope - rep.expected_slope).abs() <= 0.25;
        pass &= ok;
        summaries.push(serde_json::json!({
            "rank": rank,
            "mean_slope": rep.mean_slope,
            "expected_slope": rep.expected_slope,
            "pass": ok,
        }));
    }
    write_text(&out.join("kde_rate.csv"), &csv)?;
    let summary = serde_json::json!({ "pass": pass, "ranks": summaries });
    write_text(&out.join("kde_rate_summary.json"), &serde_json::to_string_pretty(&summary).unwrap())?;
    println!("kde-rate analysis pass = {pass}");
    if pass {
        Ok(())
    } else {
        Err(SdError::Contract("kde rate slope out of band".into()))
    }
}

fn analyze_spectrum(cfg: &ExperimentConfig, stage2: &Path, seed: u64, out: &Path) -> Result<()> {
    let pipeline = FlowPipeline::from_checkpoint(&Checkpoint::load(stage2)?)?;
    let ds = load_dataset(cfg, seed)?;
    let times = [0.0, 1.0 / 3.0, 2.0 / 3.0, 1.0];
    let points = lab::spectrum_along_flow(&pipeline, &ds, &times, 256, 0.9, seed)?;
    let mut csv = String::from("t,init,effective_rank,top_singular\n");
    for p in &points {
        csv.push_str(&format!(
            "{},anchored,{},{}\n",
            p.t, p.anchored.effective_rank, p.anchored.singular_values[0]
        ));
        csv.push_str(&format!(
            "{},gaussian,{},{}\n",
            p.t, p.gaussian.effective_rank, p.gaussian.singular_values[0]
        ));
    }
    let at0 = &points[0];
    let ratio = at0.gaussian.effective_rank as f64 / at0.anchored.effective_rank.max(1) as f64;
    let pass = ratio >= 3.0;
    write_text(&out.join("spectrum.csv"), &csv)?;
    let summary = serde_json::json!({
        "pass": pass,
        "t0_anchored_rank": at0.anchored.effective_rank,
        "t0_gaussian_rank": at0.gaussian.effective_rank,
        "ratio": ratio,
    });
    write_text(&out.join("spectrum_summary.json"), &serde_json::to_string_pretty(&summary).unwrap())?;
    println!("spectrum analysis pass = {pass} (ratio {ratio:.2})");
    if pass {
        Ok(())
    } else {
        Err(SdError::Contract("spectrum separation below 3x".into()))
    }
}

// ── ablate ──────────────────────────────────────────────────────────────

fn parse_list<T: std::str::FromStr>(cfg: &ExperimentConfig, key: &str) -> Result<Vec<T>> {
    let raw: String = cfg.parsed(key)?;
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| SdError::Parse(format!("bad list entry {s:?} for {key}")))
        })
        .collect()
}

pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    axis: &str,
    stage1: &Path,
    seed: u64,
    out: &Path,
) -> Result<()> {
    write_manifest(out, &format!("ablate-{axis}"), cfg, seed, &[("stage1", stage1.display().to_string())])?;
    let tok = Tokenizer::from_checkpoint(&Checkpoint::load(stage1)?)?;
    let ds = load_dataset(cfg, seed)?;
    let flow_cfg = flow_config_from(cfg)?;
    let n_seeds: u64 = cfg.parsed("eval.seeds")?;
    let heldout: Vec<Tensor<f32>> =
        ds.heldout_indices().iter().map(|&i| ds.window(i).clone()).collect();
    let n_eval: usize = cfg.parsed::<usize>("eval.n")?.min(heldout.len());
    let anchors = ds.train_indices();

    // evaluate one trained pipeline at one seed
    let eval = |pipeline: &FlowPipeline, steps: usize, s: u64| -> Result<(f64, f64)> {
        let gen = pipeline.generate(n_eval, steps, flow_cfg.tau_infer, s)?;
        let ds_score = metrics::discriminative_score(&heldout[..n_eval], &gen.windows, s)?;
        let lfd = metrics::latent_frechet_distance(&heldout, &gen.windows, &pipeline.tokenizer)?;
        Ok((ds_score, lfd))
    };

    let mut rows: Vec<(String, Vec<(f64, f64)>)> = Vec::new();
    match axis {
        "prior" => {
            for prior in [PriorKind::Anchor, PriorKind::Gaussian] {
                let mut per_seed = Vec::new();
                for s in 0..n_seeds {
                    let c = FlowConfig { prior, ..flow_cfg.clone() };
                    let (p, _) = train_flow(tok.clone(), &ds, &anchors, &c, seed + s)?;
                    per_seed.push(eval(&p, c.ode_steps, seed + s)?);
                }
                rows.push((prior.to_string(), per_seed));
            }
        }
        "rank" => {
            for rank in parse_list::<usize>(cfg, "ablate.ranks")? {
                let mut per_seed = Vec::new();
                for s in 0..n_seeds {
                    let c = FlowConfig { rank, ..flow_cfg.clone() };
                    let (p, _) = train_flow(tok.clone(), &ds, &anchors, &c, seed + s)?;
                    per_seed.push(eval(&p, c.ode_steps, seed + s)?);
                }
                rows.push((format!("r={rank}"), per_seed));
            }
        }
        "bandwidth" => {
            for alpha in parse_list::<f64>(cfg, "ablate.alphas")? {
                let mut per_seed = Vec::new();
                for s in 0..n_seeds {
                    let c = FlowConfig { alpha, ..flow_cfg.clone() };
                    let (p, _) = train_flow(tok.clone(), &ds, &anchors, &c, seed + s)?;
                    per_seed.push(eval(&p, c.ode_steps, seed + s)?);
                }
                rows.push((format!("alpha={alpha}"), per_seed));
            }
        }
        "steps" => {
            // one trained pipeline per seed; only the sampler budget varies
            let mut pipelines = Vec::new();
            for s in 0..n_seeds {
                let (p, _) = train_flow(tok.clone(), &ds, &anchors, &flow_cfg, seed + s)?;
                pipelines.push(p);
            }
            for steps in parse_list::<usize>(cfg, "ablate.steps")? {
                let mut per_seed = Vec::new();
                for (s, p) in pipelines.iter().enumerate() {
                    per_seed.push(eval(p, steps, seed + s as u64)?);
                }
                rows.push((format!("S={steps}"), per_seed));
            }
        }
        "heldout-fraction" => {
            let fractions = parse_list::<f64>(cfg, "ablate.fractions")?;
            let mut per_fraction: Vec<Vec<(f64, f64)>> = vec![Vec::new(); fractions.len()];
            for s in 0..n_seeds {
                let reports = metrics::heldout_latent_flow_protocol(
                    &ds,
                    &tok,
                    &flow_cfg,
                    &fractions,
                    seed + s,
                )?;
                for (i, r) in reports.iter().enumerate() {
                    per_fraction[i].push((r.ds, r.lfd));
                }
            }
            for (f, per_seed) in fractions.iter().zip(per_fraction) {
                rows.push((format!("fraction={f}"), per_seed));
            }
        }
        other => return Err(SdError::Config(format!("unknown ablation axis {other:?}"))),
    }

    let mut csv = String::from("setting,ds_mean,ds_std,lfd_mean,lfd_std,seeds\n");
    for (setting, per_seed) in &rows {
        let n = per_seed.len() as f64;
        let (ds_mean, lfd_mean) = per_seed
            .iter()
            .fold((0.0, 0.0), |(a, b), (d, l)| (a + d / n, b + l / n));
        let ds_std = (per_seed.iter().map(|(d, _)| (d - ds_mean) * (d - ds_mean)).sum::<f64>() / n)
            .sqrt();
        let lfd_std = (per_seed.iter().map(|(_, l)| (l - lfd_mean) * (l - lfd_mean)).sum::<f64>()
            / n)
            .sqrt();
        csv.push_str(&format!(
            "{setting},{ds_mean},{ds_std},{lfd_mean},{lfd_std},{}\n",
            per_seed.len()
        ));
    }
    let path = out.join(format!("ablate_{axis}.csv"));
    write_text(&path, &csv)?;
    println!("{csv}");
    println!("-> {}", path.display());
    Ok(())
}
