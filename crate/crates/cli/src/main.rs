use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wsco::audit::{audit_all, LOSSES};
use wsco::manifest::Manifest;
use wsco::mt::Detector;
use wsco::synth::{generate_scenarios, scenarios_from_lines, scenarios_to_lines, Scenario};
use wsco::trainer::{
    evaluate, pretrain_source, split_target, trend_experiment, AdaptOptions, EpochReport, TrainConfig, Trainer,
    Variant,
};

const GRAD_TOLERANCE: f64 = 1e-4;

#[derive(Parser)]
#[command(name = "wsco", version, about = "Mean-teacher adaptation experiments on synthetic detection scenarios")]
struct Cli {
    /// TOML config; omitted keys take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory for this run.
    #[arg(long, global = true, default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write source and target scenario files.
    Generate,
    /// Train the source detector.
    Pretrain(DataArgs),
    /// Adapt a source detector to the target domain.
    Adapt(AdaptArgs),
    /// Score a detector on the held-out target split.
    Eval(EvalArgs),
    /// Normalized TP/FP counts across strong-augmentation levels.
    Trend(TrendArgs),
    /// Hard/easy ratio histograms from a contrastive run.
    Stats(StatsArgs),
    /// Finite-difference checks of every loss.
    Gradcheck(GradArgs),
}

#[derive(Args)]
struct DataArgs {
    /// Scenario file written by `generate`; regenerated from the seed if absent.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long)]
    target: Option<PathBuf>,
    /// Checkpoint written by `pretrain`; trained on the fly if absent.
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum VariantArg {
    Smt,
    Wsco,
    WeakOnly,
}

impl From<VariantArg> for Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Smt => Variant::Smt,
            VariantArg::Wsco => Variant::Wsco,
            VariantArg::WeakOnly => Variant::WeakOnly,
        }
    }
}

#[derive(Args)]
struct AdaptArgs {
    #[arg(long, value_enum)]
    variant: VariantArg,
    /// Drop the semantics-calibration loss.
    #[arg(long)]
    no_lsc: bool,
    /// Drop the contrastive loss.
    #[arg(long)]
    no_luscl: bool,
    /// Contrast raw instance features instead of mapped embeddings.
    #[arg(long)]
    no_mnet: bool,
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

impl AdaptArgs {
    fn options(&self) -> AdaptOptions {
        AdaptOptions {
            calibration: !self.no_lsc,
            contrastive: !self.no_luscl,
            mapping_network: !self.no_mnet,
            ..AdaptOptions::new(self.variant.into())
        }
    }
}

#[derive(Args)]
struct EvalArgs {
    /// Detector checkpoint from `pretrain` or `adapt`.
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    target: Option<PathBuf>,
}

#[derive(Args)]
struct TrendArgs {
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u8).range(1..=5))]
    levels: u8,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct StatsArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[command(flatten)]
    data: DataArgs,
}

#[derive(Args)]
struct GradArgs {
    #[arg(long, default_value_t = 100)]
    points: usize,
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_toml(&fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)?,
        None => TrainConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    let run = Run { cfg, out: cli.out };
    match cli.command {
        Command::Generate => run.generate(),
        Command::Pretrain(a) => run.pretrain(&a),
        Command::Adapt(a) => run.adapt(&a),
        Command::Eval(a) => run.eval(&a),
        Command::Trend(a) => run.trend(&a),
        Command::Stats(a) => run.stats(&a),
        Command::Gradcheck(a) => run.gradcheck(&a),
    }
}

struct Run {
    cfg: TrainConfig,
    out: PathBuf,
}

impl Run {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// Config hash, seed and versions, plus any command-specific entries.
    fn write_manifest(&self, command: &str, extra: &[(&str, String)]) -> Result<()> {
        let mut m = Manifest::new();
        m.set_meta("command", command);
        m.set_meta("config_hash", self.cfg.hash());
        m.set_meta("seed", self.cfg.seed);
        m.set_meta("wsco_version", env!("CARGO_PKG_VERSION"));
        m.set_meta("format_version", 1);
        for (k, v) in extra {
            m.set_meta(k, v);
        }
        m.write(&self.path("manifest.txt"))?;
        fs::write(self.path("config.toml"), self.cfg.to_toml())?;
        Ok(())
    }

    fn scenarios(&self, source: Option<&Path>, target: Option<&Path>) -> Result<(Vec<Scenario>, Vec<Scenario>)> {
        let read = |p: &Path| -> Result<Vec<Scenario>> {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(scenarios_from_lines(&text)?)
        };
        match (source, target) {
            (Some(s), Some(t)) => Ok((read(s)?, read(t)?)),
            (s, t) => {
                let set = generate_scenarios(self.cfg.seed, &self.cfg.synth)?;
                let src = s.map(read).transpose()?.unwrap_or(set.source);
                let tgt = t.map(read).transpose()?.unwrap_or(set.target);
                Ok((src, tgt))
            }
        }
    }

    fn source_model(&self, data: &DataArgs, source: &[Scenario]) -> Result<Detector> {
        match &data.model {
            Some(p) => load_detector(p),
            None => {
                let pre = pretrain_source(&self.cfg, source)?;
                eprintln!("pre-trained source model: {} epochs, source mAP {:.4}", pre.epochs, pre.source_map);
                Ok(pre.detector)
            }
        }
    }

    fn generate(&self) -> Result<()> {
        let set = generate_scenarios(self.cfg.seed, &self.cfg.synth)?;
        fs::write(self.path("source.jsonl"), scenarios_to_lines(&set.source))?;
        fs::write(self.path("target.jsonl"), scenarios_to_lines(&set.target))?;
        self.write_manifest(
            "generate",
            &[("source_images", set.source.len().to_string()), ("target_images", set.target.len().to_string())],
        )?;
        println!("wrote {} source and {} target scenarios to {}", set.source.len(), set.target.len(), self.out.display());
        Ok(())
    }

    fn pretrain(&self, a: &DataArgs) -> Result<()> {
        let (source, _) = self.scenarios(a.source.as_deref(), a.target.as_deref())?;
        let pre = pretrain_source(&self.cfg, &source)?;
        save_detector(&pre.detector, &self.path("source_model.txt"))?;
        let mut w = csv::Writer::from_path(self.path("pretrain.csv"))?;
        w.write_record(["epoch", "loss"])?;
        for (e, l) in pre.losses.iter().enumerate() {
            w.write_record([(e + 1).to_string(), l.to_string()])?;
        }
        w.flush()?;
        self.write_manifest(
            "pretrain",
            &[
                ("epochs", pre.epochs.to_string()),
                ("source_map", pre.source_map.to_string()),
                ("reached_floor", pre.reached_floor.to_string()),
            ],
        )?;
        println!("source mAP {:.4} after {} epochs (floor reached: {})", pre.source_map, pre.epochs, pre.reached_floor);
        Ok(())
    }

    fn adapt(&self, a: &AdaptArgs) -> Result<()> {
        let mut cfg = self.cfg.clone();
        if let Some(e) = a.epochs {
            cfg.epochs = e;
        }
        let (source, target) = self.scenarios(a.data.source.as_deref(), a.data.target.as_deref())?;
        let model = self.source_model(&a.data, &source)?;
        let opts = a.options();
        let mut trainer = Trainer::new(cfg.clone(), opts)?;
        let (train, eval) = split_target(&target, cfg.eval_fraction)?;
        let mut state = trainer.init_state(&model, &eval)?;
        let mut w = csv::Writer::from_path(self.path("epochs.csv"))?;
        w.write_record(EPOCH_COLUMNS)?;
        let mut last = None;
        while state.epoch < cfg.epochs {
            let r = trainer.run_epoch(&mut state, &train, &eval)?;
            w.write_record(epoch_row(&r))?;
            w.flush()?;
            println!(
                "epoch {:>2}  tp {:>4}  fp {:>4}  fn {:>4}  mAP {:.4}  fp-gain {:>7.3}  loss {:.4}",
                r.epoch, r.total.tp, r.total.fp, r.total.fn_, r.map, r.fp_gain, r.losses.total
            );
            last = Some(r);
        }
        save_detector(&state.teacher, &self.path("teacher.txt"))?;
        state.to_manifest().write(&self.path("state.txt"))?;
        let mut extra = vec![("variant", opts.label())];
        if let Some(r) = &last {
            extra.push(("final_map", r.map.to_string()));
            extra.push(("teacher_checksum", r.teacher_checksum.clone()));
        }
        self.write_manifest("adapt", &extra)
    }

    fn eval(&self, a: &EvalArgs) -> Result<()> {
        let model = load_detector(&a.model)?;
        let (_, target) = self.scenarios(None, a.target.as_deref())?;
        let (_, held_out) = split_target(&target, self.cfg.eval_fraction)?;
        let ev = evaluate(&model, &held_out, &self.cfg)?;
        let mut w = csv::Writer::from_path(self.path("eval.csv"))?;
        w.write_record(["class", "tp", "fp", "fn"])?;
        for (c, n) in &ev.counts.per_class {
            w.write_record([c.to_string(), n.tp.to_string(), n.fp.to_string(), n.fn_.to_string()])?;
            println!("class {c}: tp {} fp {} fn {}", n.tp, n.fp, n.fn_);
        }
        w.flush()?;
        println!("total: tp {} fp {} fn {}  mAP {:.4}", ev.total.tp, ev.total.fp, ev.total.fn_, ev.map);
        self.write_manifest("eval", &[("model", a.model.display().to_string()), ("map", ev.map.to_string())])
    }

    fn trend(&self, a: &TrendArgs) -> Result<()> {
        let (source, target) = self.scenarios(a.data.source.as_deref(), a.data.target.as_deref())?;
        let model = self.source_model(&a.data, &source)?;
        let levels: Vec<u8> = (1..=a.levels).collect();
        let rows = trend_experiment(&self.cfg, &model, &target, &levels)?;
        let mut w = csv::Writer::from_path(self.path("trend.csv"))?;
        w.write_record(["label", "level", "tp_norm", "fp_norm", "map"])?;
        for r in &rows {
            w.write_record([r.label.clone(), r.level.to_string(), r.tp_norm.to_string(), r.fp_norm.to_string(), r.map.to_string()])?;
            println!("{:<10} TP_norm {:.3}  FP_norm {:.3}  mAP {:.4}", r.label, r.tp_norm, r.fp_norm, r.map);
        }
        w.flush()?;
        self.write_manifest("trend", &[("levels", a.levels.to_string())])
    }

    fn stats(&self, a: &StatsArgs) -> Result<()> {
        let mut cfg = self.cfg.clone();
        if let Some(e) = a.epochs {
            cfg.epochs = e;
        }
        let (source, target) = self.scenarios(a.data.source.as_deref(), a.data.target.as_deref())?;
        let model = self.source_model(&a.data, &source)?;
        let reports = Trainer::new(cfg, AdaptOptions::new(Variant::Wsco))?.adapt(&model, &target)?;
        let mut w = csv::Writer::from_path(self.path("he_histogram.csv"))?;
        w.write_record(["epoch", "bin", "count", "fraction"])?;
        for r in &reports {
            let Some(he) = &r.he else { continue };
            println!("epoch {} (anchors {}, mean ratio {:.3})", r.epoch, he.anchors, he.mean);
            println!("  {:>9}  {:>7}  {:>8}", "bin", "count", "fraction");
            for &(lo, count) in &he.histogram {
                let frac = if he.anchors == 0 { 0.0 } else { count as f64 / he.anchors as f64 };
                w.write_record([r.epoch.to_string(), format!("{lo:.1}"), count.to_string(), format!("{frac:.6}")])?;
                println!("  {:>9}  {count:>7}  {frac:>8.4}", format!("[{lo:.1},{:.1})", lo + 0.1));
            }
        }
        w.flush()?;
        self.write_manifest("stats", &[])
    }

    fn gradcheck(&self, a: &GradArgs) -> Result<()> {
        let audits = audit_all(a.points, self.cfg.seed)?;
        let mut failed = Vec::new();
        println!("{:<15} {:>6} {:>8} {:>12}", "loss", "points", "redrawn", "max rel err");
        for r in &audits {
            println!("{:<15} {:>6} {:>8} {:>12.3e}", r.loss, r.points, r.redrawn, r.max_rel_error);
            if !r.passes(GRAD_TOLERANCE) {
                failed.push(r.loss);
            }
        }
        self.write_manifest("gradcheck", &[("points", a.points.to_string()), ("losses", LOSSES.join(","))])?;
        if !failed.is_empty() {
            bail!("gradient check failed for {}", failed.join(", "));
        }
        Ok(())
    }
}

const EPOCH_COLUMNS: [&str; 19] = [
    "epoch",
    "tp",
    "fp",
    "fn",
    "map",
    "fp_gain",
    "tp_norm",
    "fp_norm",
    "loss_det",
    "loss_con",
    "loss_reg",
    "loss_grad",
    "loss_unsup",
    "loss_uscl",
    "loss_total",
    "pseudo_labels",
    "skipped",
    "mean_sigma",
    "he_mean",
];

fn epoch_row(r: &EpochReport) -> Vec<String> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let l = &r.losses;
    vec![
        r.epoch.to_string(),
        r.total.tp.to_string(),
        r.total.fp.to_string(),
        r.total.fn_.to_string(),
        r.map.to_string(),
        r.fp_gain.to_string(),
        r.tp_norm.to_string(),
        r.fp_norm.to_string(),
        l.det.to_string(),
        l.con.to_string(),
        l.reg.to_string(),
        opt(l.grad),
        opt(l.unsup),
        opt(l.uscl),
        l.total.to_string(),
        r.pseudo_labels.to_string(),
        r.skipped.to_string(),
        opt(r.mean_sigma),
        opt(r.he.as_ref().map(|h| h.mean)),
    ]
}

fn save_detector(det: &Detector, path: &Path) -> Result<()> {
    let mut m = Manifest::new();
    m.set_meta("d_feat", det.d_feat());
    m.set_meta("classes", det.classes());
    det.store(&mut m, "detector");
    m.write(path).with_context(|| format!("writing {}", path.display()))
}

fn load_detector(path: &Path) -> Result<Detector> {
    let m = Manifest::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(Detector::load(&m, "detector", m.meta_parse("d_feat")?, m.meta_parse("classes")?)?)
}
