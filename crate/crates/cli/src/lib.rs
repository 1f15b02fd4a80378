//! `cafe` subcommands.
//!
//! Every subcommand reads an optional INI run configuration, applies
//! `--set section.key=value` overrides and then its own flags, and writes
//! only below the output directory (`--out`, else `CAFE_OUT_DIR`, else
//! `[run] out_dir`). The effective configuration is echoed there as
//! `config.ini`.

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};

use cafe::attribution::{Baseline, Model};
use cafe::erf::{activation_map, compute_erf, select_target, TargetPolicy};
use cafe::eval::{compare_methods, layer_scan, CompareOptions, EvalCase, InsertionOptions, Ranker, ScanOptions};
use cafe::io::csv::{
    write_auc_csv, write_comparison_csv, write_curves_csv, write_erf_csv,
    write_layer_counts_csv, write_nonlocality_csv,
};
use cafe::io::{
    export_diverging, export_grayscale, generate_suite, load_image, load_sae, load_suite,
    load_vit, save_sae, write_suite, BaselineKind, InstanceKind, RunConfig, SuiteInstance,
};
use cafe::sae::{train_sae_with_report, SaeModel};
use cafe::vit::{hidden_states, init_vit, ViTWeights};
use cafe::{Error, Tensor};
use clap::error::ErrorKind;
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

/// Pixels per patch side in exported heatmaps.
const HEATMAP_CELL: usize = 8;

#[derive(Parser, Debug)]
#[command(
    name = "cafe",
    version,
    about = "ERF attribution for SAE features of small vision transformers",
    arg_required_else_help = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// INI run configuration.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Output directory (falls back to CAFE_OUT_DIR, then [run] out_dir).
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override one configuration value; repeatable.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Args, Debug)]
struct ModelArgs {
    /// ViT checkpoint; a freshly initialized [vit] model when absent.
    #[arg(long, value_name = "PATH")]
    vit: Option<PathBuf>,
    /// SAE checkpoint; a random tied SAE when absent.
    #[arg(long, value_name = "PATH")]
    sae: Option<PathBuf>,
    /// Layer the SAE reads; defaults to the layer stored with the SAE.
    #[arg(long)]
    layer: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum KindFilter {
    All,
    NonLocal,
    Local,
}

#[derive(Args, Debug)]
struct SourceArgs {
    /// Planted-suite manifest written by gen-synthetic.
    #[arg(long, value_name = "MANIFEST", conflicts_with_all = ["vit", "sae", "image", "feature"])]
    suite: Option<PathBuf>,
    /// Suite instances to include.
    #[arg(long, value_enum, default_value = "all", requires = "suite")]
    kind: KindFilter,
    #[command(flatten)]
    model: ModelArgs,
    /// Feature to explain (single-model mode).
    #[arg(long)]
    feature: Option<usize>,
    /// Input images (single-model mode); repeatable.
    #[arg(long, value_name = "PATH")]
    image: Vec<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a planted-router suite: checkpoints, images and a manifest.
    GenSynthetic {
        #[command(flatten)]
        common: Common,
        /// Router (non-local) instances [synthetic.instances].
        #[arg(long)]
        instances: Option<usize>,
        /// Identity-routed (local) instances [synthetic.local_instances].
        #[arg(long)]
        local_instances: Option<usize>,
        /// Suite seed [synthetic.seed].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train an SAE on one layer's token latents.
    TrainSae {
        #[command(flatten)]
        common: Common,
        /// ViT checkpoint; a freshly initialized [vit] model when absent.
        #[arg(long, value_name = "PATH")]
        vit: Option<PathBuf>,
        /// Layer whose token latents train the SAE (0 is the embedding).
        #[arg(long)]
        layer: usize,
        /// Training images; repeatable.
        #[arg(long, value_name = "PATH", required = true)]
        image: Vec<PathBuf>,
        /// L1 coefficient [sae.lambda].
        #[arg(long)]
        lambda: Option<f64>,
        /// Optimizer steps [sae.steps].
        #[arg(long)]
        steps: Option<usize>,
        /// Initialization and batch seed [sae.seed].
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Attribute one feature activation to image patches.
    Erf {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        model: ModelArgs,
        /// gradient, ig, kernelshap or attnlrp [attribution.method].
        #[arg(long)]
        method: Option<String>,
        /// SAE feature k.
        #[arg(long)]
        feature: usize,
        /// Input image (binary PPM or PGM).
        #[arg(long, value_name = "PATH")]
        image: PathBuf,
        /// Explain this token instead of the most active one.
        #[arg(long, conflicts_with = "cls")]
        token: Option<usize>,
        /// Explain the CLS token.
        #[arg(long)]
        cls: bool,
        /// Mean image for the `mean` baseline.
        #[arg(long, value_name = "PATH")]
        baseline_image: Option<PathBuf>,
    },
    /// Insertion curves and AUCs for one ranking method.
    InsertionEval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArgs,
        /// Ranking method [attribution.method].
        #[arg(long)]
        method: Option<String>,
    },
    /// Per-feature non-locality scores and flags.
    NonlocalScan {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArgs,
        /// Chebyshev radius around the activation peak [eval.radius].
        #[arg(long)]
        radius: Option<usize>,
        /// Flag threshold on the median score [eval.theta].
        #[arg(long)]
        theta: Option<f64>,
        /// Leading SAE features to scan per layer [eval.n_features].
        #[arg(long)]
        n_features: Option<usize>,
    },
    /// Insertion AUC comparison of several rankings.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        source: SourceArgs,
        /// Comma-separated rankings, e.g. `activation,attnlrp,ig`.
        #[arg(long)]
        methods: Option<String>,
    },
}

/// A failure with its exit code: 1 for usage and configuration problems,
/// 2 for data and numeric ones.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError {
            code: if e.is_usage() { 1 } else { 2 },
            message: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError {
        code: 1,
        message: msg.into(),
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Messages go to `out` and `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = write!(out, "{text}");
                    0
                }
                ErrorKind::InvalidSubcommand => {
                    let help = Cli::command().render_help();
                    let _ = write!(err, "{text}\n{help}");
                    1
                }
                _ => {
                    let _ = write!(err, "{text}");
                    1
                }
            };
        }
    };
    match dispatch(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.code
        }
    }
}

struct Session {
    cfg: RunConfig,
    out: PathBuf,
}

impl Session {
    fn open(common: &Common, flags: &[(&str, &str, Option<String>)]) -> CliResult<Self> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        for s in &common.set {
            let (lhs, v) = s
                .split_once('=')
                .ok_or_else(|| usage(format!("--set expects SECTION.KEY=VALUE, got `{s}`")))?;
            let (sec, key) = lhs
                .split_once('.')
                .ok_or_else(|| usage(format!("--set expects SECTION.KEY=VALUE, got `{s}`")))?;
            cfg.set(sec.trim(), key.trim(), v)?;
        }
        for (sec, key, v) in flags {
            if let Some(v) = v {
                cfg.set(sec, key, v)?;
            }
        }
        let out = common
            .out
            .clone()
            .or_else(|| std::env::var_os("CAFE_OUT_DIR").filter(|v| !v.is_empty()).map(PathBuf::from))
            .or_else(|| cfg.run.out_dir.as_ref().map(PathBuf::from))
            .ok_or_else(|| usage("no output directory: pass --out, set CAFE_OUT_DIR or [run] out_dir"))?;
        std::fs::create_dir_all(&out).map_err(|e| CliError::from(io_error(&out, e)))?;
        cfg.run.out_dir = Some(out.display().to_string());
        let s = Session { cfg, out };
        s.write_text("config.ini", &s.cfg.to_ini())?;
        Ok(s)
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write_text(&self, name: &str, text: &str) -> CliResult<()> {
        let p = self.path(name);
        std::fs::write(&p, text).map_err(|e| io_error(&p, e).into())
    }

    fn baseline(&self, images: &[&Tensor], explicit: Option<&Path>) -> CliResult<Baseline> {
        match self.cfg.attribution.baseline {
            BaselineKind::Zero => Ok(Baseline::Zero),
            BaselineKind::Mean => {
                if let Some(p) = explicit {
                    let dtype = images.first().map_or(self.cfg.vit.dtype, |i| i.dtype());
                    return Ok(Baseline::Mean(load_image(p, dtype)?));
                }
                if images.len() < 2 {
                    return Err(usage("the mean baseline needs --baseline-image or several images"));
                }
                Ok(Baseline::Mean(mean_image(images)?))
            }
        }
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

fn mean_image(images: &[&Tensor]) -> CliResult<Tensor> {
    let first = images[0];
    let mut acc = vec![0.0; first.numel()];
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::Dimension("images differ in shape".into()).into());
        }
        acc.iter_mut().zip(im.data()).for_each(|(a, x)| *a += x);
    }
    let n = images.len() as f64;
    Ok(Tensor::new(
        first.shape().to_vec(),
        acc.into_iter().map(|a| a / n).collect(),
        first.dtype(),
    )?)
}

fn some<T: ToString>(v: &Option<T>) -> Option<String> {
    v.as_ref().map(ToString::to_string)
}

fn load_model(cfg: &RunConfig, args: &ModelArgs) -> CliResult<(ViTWeights, SaeModel, usize)> {
    let vit = match &args.vit {
        Some(p) => load_vit(p)?,
        None => init_vit(&cfg.vit)?,
    };
    let (sae, stored) = match &args.sae {
        Some(p) => load_sae(p)?,
        None => {
            let d = vit.config.dim;
            let m = cfg.sae.m.unwrap_or(2 * d);
            (SaeModel::random(d, m, cfg.sae.seed, vit.config.dtype)?, None)
        }
    };
    let layer = args
        .layer
        .or(stored)
        .ok_or_else(|| usage("--layer is required when the SAE checkpoint records no layer"))?;
    Ok((vit, sae, layer))
}

fn load_images(paths: &[PathBuf], vit: &ViTWeights) -> CliResult<Vec<(String, Tensor)>> {
    paths
        .iter()
        .map(|p| Ok((p.display().to_string(), load_image(p, vit.config.dtype)?)))
        .collect()
}

/// Models, images and targets for the evaluation subcommands.
enum Source {
    Suite(Vec<SuiteInstance>),
    Single {
        vit: ViTWeights,
        sae: SaeModel,
        layer: usize,
        feature: usize,
        images: Vec<(String, Tensor)>,
    },
}

impl Source {
    fn open(cfg: &RunConfig, a: &SourceArgs) -> CliResult<Self> {
        if let Some(m) = &a.suite {
            let (_, all) = load_suite(m)?;
            let keep = |i: &SuiteInstance| match a.kind {
                KindFilter::All => true,
                KindFilter::NonLocal => i.kind == InstanceKind::Router,
                KindFilter::Local => i.kind == InstanceKind::Identity,
            };
            let insts: Vec<SuiteInstance> = all.into_iter().filter(keep).collect();
            if insts.is_empty() {
                return Err(Error::Data("no suite instances selected".into()).into());
            }
            return Ok(Source::Suite(insts));
        }
        let (Some(feature), false) = (a.feature, a.image.is_empty()) else {
            return Err(usage("pass --suite, or --image with --feature"));
        };
        let (vit, sae, layer) = load_model(cfg, &a.model)?;
        let images = load_images(&a.image, &vit)?;
        Ok(Source::Single {
            vit,
            sae,
            layer,
            feature,
            images,
        })
    }

    fn images(&self) -> Vec<&Tensor> {
        match self {
            Source::Suite(s) => s.iter().map(|i| &i.image).collect(),
            Source::Single { images, .. } => images.iter().map(|(_, t)| t).collect(),
        }
    }

    /// One case per suite instance, or per image whose feature fires.
    fn cases(&self, skipped: &mut Vec<String>) -> CliResult<Vec<EvalCase<'_>>> {
        match self {
            Source::Suite(s) => Ok(s
                .iter()
                .map(|i| EvalCase {
                    id: i.id.clone(),
                    model: i.model(),
                    image: i.image.clone(),
                    target: i.target(),
                })
                .collect()),
            Source::Single {
                vit,
                sae,
                layer,
                feature,
                images,
            } => {
                let model = Model { vit, sae };
                let mut cases = Vec::new();
                for (id, im) in images {
                    let act = activation_map(&model, im, *layer, *feature)?;
                    match select_target(&act, TargetPolicy::MaxActivation) {
                        Ok(t) => cases.push(EvalCase {
                            id: id.clone(),
                            model,
                            image: im.clone(),
                            target: t.target(),
                        }),
                        Err(Error::NoTarget(msg)) => skipped.push(format!("{id}: {msg}")),
                        Err(e) => return Err(e.into()),
                    }
                }
                Ok(cases)
            }
        }
    }
}

fn dispatch(cmd: Command, out: &mut dyn Write) -> CliResult<()> {
    match cmd {
        Command::GenSynthetic {
            common,
            instances,
            local_instances,
            seed,
        } => {
            let s = Session::open(
                &common,
                &[
                    ("synthetic", "instances", some(&instances)),
                    ("synthetic", "local_instances", some(&local_instances)),
                    ("synthetic", "seed", some(&seed)),
                ],
            )?;
            let suite = generate_suite(&s.cfg.synthetic)?;
            let manifest = write_suite(&s.out, &s.cfg.synthetic, &suite)?;
            let _ = writeln!(
                out,
                "wrote {} instances to {}",
                manifest.instances.len(),
                s.path("manifest.json").display()
            );
            Ok(())
        }
        Command::TrainSae {
            common,
            vit,
            layer,
            image,
            lambda,
            steps,
            seed,
        } => {
            let s = Session::open(
                &common,
                &[
                    ("sae", "lambda", some(&lambda)),
                    ("sae", "steps", some(&steps)),
                    ("sae", "seed", some(&seed)),
                ],
            )?;
            let vit = match &vit {
                Some(p) => load_vit(p)?,
                None => init_vit(&s.cfg.vit)?,
            };
            if layer > vit.config.depth {
                return Err(usage(format!("layer {layer} exceeds depth {}", vit.config.depth)));
            }
            let mut rows = Vec::new();
            let mut n = 0;
            for (_, im) in load_images(&image, &vit)? {
                let h = &hidden_states(&vit, &im)?[layer];
                n = h.shape()[1];
                rows.extend_from_slice(h.to_dtype(cafe::DType::F64).data());
            }
            let count = rows.len() / n.max(1);
            let latents = Tensor::new(vec![count, n], rows, vit.config.dtype)?;
            let (sae, report) = train_sae_with_report(&latents, &s.cfg.sae)?;
            save_sae(&s.path("sae.ckpt"), &sae, Some(layer))?;
            let _ = writeln!(
                out,
                "trained m = {} on {count} latents: final loss {:.6e}, {} resampled",
                sae.m(),
                report.final_loss,
                report.resampled
            );
            Ok(())
        }
        Command::Erf {
            common,
            model,
            method,
            feature,
            image,
            token,
            cls,
            baseline_image,
        } => {
            let s = Session::open(&common, &[("attribution", "method", method)])?;
            let (vit, sae, layer) = load_model(&s.cfg, &model)?;
            let m = Model { vit: &vit, sae: &sae };
            let im = load_image(&image, vit.config.dtype)?;
            let baseline = s.baseline(&[&im], baseline_image.as_deref())?;
            let act = activation_map(&m, &im, layer, feature)?;
            let policy = match (token, cls) {
                (Some(t), _) => TargetPolicy::Explicit(t),
                (None, true) => TargetPolicy::Cls,
                (None, false) => TargetPolicy::MaxActivation,
            };
            let target = select_target(&act, policy)?;
            let method = s.cfg.attribution.method;
            let erf = compute_erf(&m, method, &target, &im, &s.cfg.attribution.params, &baseline)?;
            let grid = vit.config.grid();
            write_erf_csv(&s.path("erf.csv"), &erf)?;
            export_diverging(&s.path("erf.ppm"), &erf.scores, grid, HEATMAP_CELL)?;
            export_grayscale(&s.path("activation.pgm"), act.patch_values(), grid, HEATMAP_CELL)?;
            let _ = writeln!(
                out,
                "{method} ERF of layer {layer} feature {feature} at token {} (z = {:.6e})",
                target.token,
                act.values[target.token]
            );
            Ok(())
        }
        Command::InsertionEval {
            common,
            source,
            method,
        } => {
            let s = Session::open(&common, &[("attribution", "method", method)])?;
            let src = Source::open(&s.cfg, &source)?;
            let rankers = [Ranker::Erf(s.cfg.attribution.method)];
            let cmp = evaluate(&s, &src, &rankers, out)?;
            write_curves_csv(&s.path("curves.csv"), &cmp.curves)?;
            write_auc_csv(&s.path("auc.csv"), &names(&rankers), &cmp.aucs)?;
            if let Some(r) = cmp.rows.iter().find(|r| r.layer.is_none()).or(cmp.rows.first()) {
                let _ = writeln!(out, "{}: mean AUC {:.6} over {} targets", r.method, r.mean_auc, r.n_targets);
            }
            Ok(())
        }
        Command::Compare {
            common,
            source,
            methods,
        } => {
            let s = Session::open(&common, &[("eval", "methods", methods)])?;
            let src = Source::open(&s.cfg, &source)?;
            let rankers = s.cfg.eval.methods.clone();
            if rankers.is_empty() {
                return Err(usage("no methods to compare"));
            }
            let cmp = evaluate(&s, &src, &rankers, out)?;
            write_comparison_csv(&s.path("comparison.csv"), &cmp.rows)?;
            write_curves_csv(&s.path("curves.csv"), &cmp.curves)?;
            write_auc_csv(&s.path("auc.csv"), &names(&rankers), &cmp.aucs)?;
            let _ = writeln!(out, "{:<12} {:>5} {:>9} {:>9} {:>8} {:>6}", "method", "layer", "mean_auc", "sd", "win", "n");
            for r in &cmp.rows {
                let layer = r.layer.map_or_else(|| "all".to_string(), |l| l.to_string());
                let _ = writeln!(
                    out,
                    "{:<12} {:>5} {:>9.6} {:>9.6} {:>8.3} {:>6}",
                    r.method, layer, r.mean_auc, r.sd, r.win_rate, r.n_targets
                );
            }
            Ok(())
        }
        Command::NonlocalScan {
            common,
            source,
            radius,
            theta,
            n_features,
        } => {
            let s = Session::open(
                &common,
                &[
                    ("eval", "radius", some(&radius)),
                    ("eval", "theta", some(&theta)),
                    ("eval", "n_features", some(&n_features)),
                ],
            )?;
            let src = Source::open(&s.cfg, &source)?;
            let images = src.images();
            let opts = ScanOptions {
                n_features: s.cfg.eval.n_features,
                radius: s.cfg.eval.radius,
                theta: s.cfg.eval.theta,
                method: s.cfg.attribution.method,
                params: s.cfg.attribution.params.clone(),
                baseline: s.baseline(&images, None)?,
            };
            match &src {
                Source::Single {
                    vit, sae, layer, ..
                } => {
                    let ims: Vec<Tensor> = images.into_iter().cloned().collect();
                    let report = layer_scan(vit, &[(*layer, sae)], &ims, &opts)?;
                    let rows: Vec<_> = report.features.iter().map(|f| (None, f.clone())).collect();
                    write_nonlocality_csv(&s.path("nonlocality.csv"), &rows)?;
                    write_layer_counts_csv(&s.path("layers.csv"), &report.layers)?;
                    for l in &report.layers {
                        let _ = writeln!(
                            out,
                            "layer {}: {} of {} features flagged, {} never fired",
                            l.layer, l.flagged, l.scanned, l.never_fired
                        );
                    }
                }
                Source::Suite(insts) => scan_suite(&s, insts, &opts, out)?,
            }
            Ok(())
        }
    }
}

fn names(rankers: &[Ranker]) -> Vec<String> {
    rankers.iter().map(ToString::to_string).collect()
}

fn evaluate(
    s: &Session,
    src: &Source,
    rankers: &[Ranker],
    out: &mut dyn Write,
) -> CliResult<cafe::eval::Comparison> {
    let mut skipped = Vec::new();
    let cases = src.cases(&mut skipped)?;
    if cases.is_empty() {
        return Err(Error::Data("no image has a firing target".into()).into());
    }
    let opts = CompareOptions {
        params: s.cfg.attribution.params.clone(),
        baseline: s.baseline(&src.images(), None)?,
        insertion: InsertionOptions {
            step: s.cfg.eval.step,
            deletion: s.cfg.eval.deletion,
        },
    };
    let cmp = compare_methods(&cases, rankers, &opts)?;
    for sk in &cmp.skipped {
        skipped.push(format!("{}: {}", sk.target_id, sk.reason));
    }
    for sk in &skipped {
        let _ = writeln!(out, "skipped {sk}");
    }
    Ok(cmp)
}

/// Scans every instance's SAE over its own image, then scores the flags of
/// the planted features against the instance kinds.
fn scan_suite(s: &Session, insts: &[SuiteInstance], opts: &ScanOptions, out: &mut dyn Write) -> CliResult<()> {
    let mut rows = Vec::new();
    let mut layers: Vec<cafe::eval::LayerCount> = Vec::new();
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for inst in insts {
        let layer = inst.planted.layer;
        let report = layer_scan(
            &inst.planted.weights,
            &[(layer, &inst.sae)],
            std::slice::from_ref(&inst.image),
            opts,
        )?;
        for f in &report.features {
            if f.feature == inst.feature {
                match (inst.kind == InstanceKind::Router, f.flagged) {
                    (true, true) => tp += 1,
                    (false, true) => fp += 1,
                    (true, false) => fneg += 1,
                    (false, false) => {}
                }
            }
            rows.push((Some(inst.id.clone()), f.clone()));
        }
        for l in report.layers {
            match layers.iter_mut().find(|x| x.layer == l.layer) {
                Some(x) => {
                    x.scanned += l.scanned;
                    x.flagged += l.flagged;
                    x.never_fired += l.never_fired;
                }
                None => layers.push(l),
            }
        }
    }
    layers.sort_by_key(|l| l.layer);
    write_nonlocality_csv(&s.path("nonlocality.csv"), &rows)?;
    write_layer_counts_csv(&s.path("layers.csv"), &layers)?;
    let ratio = |a: usize, b: usize| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
    let _ = writeln!(
        out,
        "planted features: precision {:.3}, recall {:.3} ({tp} true, {fp} false positives, {fneg} missed)",
        ratio(tp, tp + fp),
        ratio(tp, tp + fneg)
    );
    Ok(())
}
