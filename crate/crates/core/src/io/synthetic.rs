//! Planted-router suites: seeded instances with known causal patches.
//!
//! Each instance is a small ViT with one hand-wired routing head, an SAE
//! whose feature 0 reads the planted direction, and one image. Router
//! instances copy content from source patches `S` (all outside Chebyshev
//! radius 1 of the sink) to the sink token; identity instances make the sink
//! its own cause.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::{load_sae, load_vit, save_sae, save_vit};
use super::image::{load_image, save_image};
use crate::attribution::{Model, Target};
use crate::error::{Error, Result};
use crate::exec;
use crate::sae::SaeModel;
use crate::tensor::{DType, Tensor};
use crate::vit::{
    build_identity_router, build_planted_router, pair_direction, AblationReport, PlantedModel,
    PlantedRouterSpec, ViTConfig,
};

pub const MANIFEST_VERSION: u32 = 1;
/// Attempts per instance before giving up on a draw that fails its ablation.
const MAX_ATTEMPTS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticConfig {
    /// Router (non-local) instances.
    pub instances: usize,
    /// Identity-routed (local) instances, generated after the router ones.
    pub local_instances: usize,
    pub seed: u64,
    pub image_size: usize,
    pub patch_size: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_dim: usize,
    pub sae_features: usize,
    pub max_sources: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            instances: 100,
            local_instances: 0,
            seed: 0,
            image_size: 24,
            patch_size: 4,
            depth: 2,
            heads: 4,
            dim: 32,
            mlp_dim: 64,
            sae_features: 16,
            max_sources: 3,
        }
    }
}

impl SyntheticConfig {
    pub fn vit_config(&self, seed: u64) -> ViTConfig {
        ViTConfig {
            image_size: self.image_size,
            patch_size: self.patch_size,
            channels: 3,
            depth: self.depth,
            heads: self.heads,
            dim: self.dim,
            mlp_dim: self.mlp_dim,
            use_cls_token: true,
            layer_norm: true,
            ln_eps: 1e-5,
            dtype: DType::F64,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = self.vit_config(0);
        cfg.validate()?;
        if self.max_sources == 0 || self.sae_features == 0 {
            return Err(Error::Config(
                "max_sources and sae_features must be positive".into(),
            ));
        }
        if cfg.grid() < 4 {
            return Err(Error::Config(format!(
                "a {0}×{0} patch grid leaves no room for sources outside radius 1",
                cfg.grid()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceKind {
    #[serde(rename = "non-local")]
    Router,
    #[serde(rename = "local")]
    Identity,
}

#[derive(Clone, Debug)]
pub struct SuiteInstance {
    pub id: String,
    pub kind: InstanceKind,
    pub planted: PlantedModel,
    pub sae: SaeModel,
    pub feature: usize,
    pub head: usize,
    pub image: Tensor,
    /// Ablation probes measured on `image`.
    pub ablation: AblationReport,
}

impl SuiteInstance {
    pub fn model(&self) -> Model<'_> {
        Model {
            vit: &self.planted.weights,
            sae: &self.sae,
        }
    }

    pub fn target(&self) -> Target {
        Target {
            layer: self.planted.layer,
            token: self.planted.sink,
            feature: self.feature,
        }
    }

    /// Patch index of the sink token.
    pub fn sink_patch(&self) -> usize {
        self.planted.sink - 1
    }
}

fn chebyshev(a: usize, b: usize, g: usize) -> usize {
    (a / g).abs_diff(b / g).max((a % g).abs_diff(b % g))
}

/// Pixels `k/255` with `k` uniform in `51..=204`, so PPM storage is exact.
fn draw_image(cfg: &ViTConfig, rng: &mut ChaCha8Rng) -> Tensor {
    let shape = cfg.image_shape();
    Tensor::from_fn(shape, cfg.dtype, |_| f64::from(rng.random_range(51u8..=204)) / 255.0)
}

fn attempt(
    cfg: &SyntheticConfig,
    kind: InstanceKind,
    id: String,
    rng: &mut ChaCha8Rng,
) -> Result<SuiteInstance> {
    let vit_cfg = cfg.vit_config(rng.random());
    let g = vit_cfg.grid();
    let p = vit_cfg.num_patches();
    let sink_patch = rng.random_range(0..p);
    let sources = match kind {
        InstanceKind::Router => {
            let far: Vec<usize> = (0..p).filter(|&q| chebyshev(q, sink_patch, g) > 1).collect();
            let n = rng.random_range(1..=cfg.max_sources.min(far.len()));
            let mut s: Vec<usize> = sample(rng, far.len(), n).into_iter().map(|i| far[i]).collect();
            s.sort_unstable();
            s
        }
        InstanceKind::Identity => Vec::new(),
    };
    let spec = PlantedRouterSpec {
        sources,
        sink: vit_cfg.patch_token(sink_patch),
        direction: pair_direction(cfg.dim, rng.random_range(0..cfg.dim / 2)),
        head: rng.random_range(0..cfg.heads),
        strength: 1.0,
        layer: None,
    };
    let planted = match kind {
        InstanceKind::Router => build_planted_router(&vit_cfg, &spec)?,
        InstanceKind::Identity => build_identity_router(&vit_cfg, &spec)?,
    };
    let sae = SaeModel::planted(&spec.direction, cfg.sae_features, 0, rng.random(), DType::F64)?;
    let image = draw_image(&vit_cfg, rng);
    let ablation = planted.ablation(&image)?;
    ablation.check(kind == InstanceKind::Identity)?;
    Ok(SuiteInstance {
        id,
        kind,
        planted,
        sae,
        feature: 0,
        head: spec.head,
        image,
        ablation,
    })
}

/// Instance `index` of the suite; draws from its own RNG stream.
pub fn generate_instance(cfg: &SyntheticConfig, index: usize) -> Result<SuiteInstance> {
    let kind = if index < cfg.instances {
        InstanceKind::Router
    } else {
        InstanceKind::Identity
    };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index as u64);
    let id = format!("inst_{index:03}");
    let mut last = None;
    for _ in 0..MAX_ATTEMPTS {
        match attempt(cfg, kind, id.clone(), &mut rng) {
            Ok(inst) => return Ok(inst),
            Err(e @ Error::Spec(_)) => last = Some(e),
            Err(e) => return Err(e),
        }
    }
    Err(last.expect("at least one attempt"))
}

pub fn generate_suite(cfg: &SyntheticConfig) -> Result<Vec<SuiteInstance>> {
    cfg.validate()?;
    let idx: Vec<usize> = (0..cfg.instances + cfg.local_instances).collect();
    exec::try_map(&idx, |&i| generate_instance(cfg, i))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub kind: InstanceKind,
    /// Ground-truth causal patches (the sink's own patch for local instances).
    pub sources: Vec<usize>,
    pub sink_token: usize,
    pub sink_patch: usize,
    pub head: usize,
    pub layer: usize,
    pub feature: usize,
    pub vit: String,
    pub sae: String,
    pub image: String,
    pub activation: f64,
    pub source_drop: f64,
    pub max_other_change: f64,
    pub sink_change: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteManifest {
    pub format_version: u32,
    pub config: SyntheticConfig,
    pub instances: Vec<ManifestEntry>,
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

/// Writes `inst_XXX/{vit.ckpt,sae.ckpt,image.ppm}` and `manifest.json` under `dir`.
pub fn write_suite(dir: &Path, cfg: &SyntheticConfig, suite: &[SuiteInstance]) -> Result<SuiteManifest> {
    mkdir(dir)?;
    let mut entries = Vec::with_capacity(suite.len());
    for inst in suite {
        let sub = dir.join(&inst.id);
        mkdir(&sub)?;
        let rel = |f: &str| format!("{}/{f}", inst.id);
        save_vit(&sub.join("vit.ckpt"), &inst.planted.weights)?;
        save_sae(&sub.join("sae.ckpt"), &inst.sae, Some(inst.planted.layer))?;
        save_image(&sub.join("image.ppm"), &inst.image)?;
        entries.push(ManifestEntry {
            id: inst.id.clone(),
            kind: inst.kind,
            sources: inst.planted.ground_truth.clone(),
            sink_token: inst.planted.sink,
            sink_patch: inst.sink_patch(),
            head: inst.head,
            layer: inst.planted.layer,
            feature: inst.feature,
            vit: rel("vit.ckpt"),
            sae: rel("sae.ckpt"),
            image: rel("image.ppm"),
            activation: inst.ablation.activation,
            source_drop: inst.ablation.source_drop,
            max_other_change: inst.ablation.max_other_change,
            sink_change: inst.ablation.sink_change,
        });
    }
    let manifest = SuiteManifest {
        format_version: MANIFEST_VERSION,
        config: cfg.clone(),
        instances: entries,
    };
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<SuiteManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: SuiteManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if m.format_version != MANIFEST_VERSION {
        return Err(Error::format(
            path,
            format!(
                "format_version {} is not supported (expected {MANIFEST_VERSION})",
                m.format_version
            ),
        ));
    }
    Ok(m)
}

/// Loads every instance listed in `manifest_path`.
pub fn load_suite(manifest_path: &Path) -> Result<(SuiteManifest, Vec<SuiteInstance>)> {
    let manifest = read_manifest(manifest_path)?;
    let base: PathBuf = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::with_capacity(manifest.instances.len());
    for e in &manifest.instances {
        let weights = load_vit(&base.join(&e.vit))?;
        let (sae, _) = load_sae(&base.join(&e.sae))?;
        let image = load_image(&base.join(&e.image), weights.config.dtype)?;
        let n = sae.n();
        let direction = sae.w_e.data()[e.feature * n..(e.feature + 1) * n].to_vec();
        out.push(SuiteInstance {
            id: e.id.clone(),
            kind: e.kind,
            planted: PlantedModel {
                weights,
                ground_truth: e.sources.clone(),
                sink: e.sink_token,
                direction,
                layer: e.layer,
            },
            sae,
            feature: e.feature,
            head: e.head,
            image,
            ablation: AblationReport {
                activation: e.activation,
                source_drop: e.source_drop,
                max_other_change: e.max_other_change,
                sink_change: e.sink_change,
            },
        });
    }
    Ok((manifest, out))
}
