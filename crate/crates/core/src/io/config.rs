//! Sectioned `key = value` run configuration.
//!
//! Sections mirror the modules: `[run]`, `[vit]`, `[sae]`, `[attribution]`,
//! `[eval]`, `[synthetic]`. Unknown sections and keys are rejected. Flags
//! override file values through [`RunConfig::set`], and
//! [`RunConfig::to_ini`] renders the effective configuration.

use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use ini::Ini;

use super::synthetic::SyntheticConfig;
use crate::attribution::{AttributionParams, Method};
use crate::error::{Error, Result};
use crate::eval::Ranker;
use crate::sae::SaeTrainConfig;
use crate::tensor::DType;
use crate::vit::ViTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Zero,
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSection {
    pub out_dir: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionSection {
    pub method: Method,
    pub baseline: BaselineKind,
    pub params: AttributionParams,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub methods: Vec<Ranker>,
    pub step: usize,
    pub deletion: bool,
    pub radius: usize,
    pub theta: f64,
    pub n_features: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub run: RunSection,
    pub vit: ViTConfig,
    pub sae: SaeTrainConfig,
    pub attribution: AttributionSection,
    pub eval: EvalSection,
    pub synthetic: SyntheticConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run: RunSection { out_dir: None },
            vit: ViTConfig::default(),
            sae: SaeTrainConfig::default(),
            attribution: AttributionSection {
                method: Method::AttnLrp,
                baseline: BaselineKind::Zero,
                params: AttributionParams::default(),
            },
            eval: EvalSection {
                methods: vec![
                    Ranker::Activation,
                    Ranker::Erf(Method::AttnLrp),
                    Ranker::Erf(Method::Ig),
                    Ranker::Erf(Method::KernelShap),
                    Ranker::Erf(Method::Gradient),
                ],
                step: 1,
                deletion: false,
                radius: 1,
                theta: 0.5,
                n_features: 100,
            },
            synthetic: SyntheticConfig::default(),
        }
    }
}

fn parse<T: FromStr>(section: &str, key: &str, v: &str) -> Result<T>
where
    T::Err: Display,
{
    v.trim()
        .parse()
        .map_err(|e| Error::Config(format!("[{section}] {key} = `{v}`: {e}")))
}

fn list<T: FromStr>(section: &str, key: &str, v: &str) -> Result<Vec<T>>
where
    T::Err: Display,
{
    v.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(section, key, s))
        .collect()
}

fn join<T: Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn from_ini_str(text: &str) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut cfg = RunConfig::default();
        for (section, props) in ini.iter() {
            let Some(section) = section else {
                if let Some((k, _)) = props.iter().next() {
                    return Err(Error::Config(format!("key `{k}` outside any section")));
                }
                continue;
            };
            for (k, v) in props.iter() {
                cfg.set(section, k, v)?;
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_ini_str(&text)
    }

    /// Sets one value; unknown sections or keys are config errors.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> Result<()> {
        let s = section;
        match (section, key) {
            ("run", "out_dir") => {
                self.run.out_dir = Some(v.trim().to_string()).filter(|d| !d.is_empty())
            }
            ("vit", "image_size") => self.vit.image_size = parse(s, key, v)?,
            ("vit", "patch_size") => self.vit.patch_size = parse(s, key, v)?,
            ("vit", "channels") => self.vit.channels = parse(s, key, v)?,
            ("vit", "depth") => self.vit.depth = parse(s, key, v)?,
            ("vit", "heads") => self.vit.heads = parse(s, key, v)?,
            ("vit", "dim") => self.vit.dim = parse(s, key, v)?,
            ("vit", "mlp_dim") => self.vit.mlp_dim = parse(s, key, v)?,
            ("vit", "use_cls_token") => self.vit.use_cls_token = parse(s, key, v)?,
            ("vit", "layer_norm") => self.vit.layer_norm = parse(s, key, v)?,
            ("vit", "ln_eps") => self.vit.ln_eps = parse(s, key, v)?,
            ("vit", "dtype") => self.vit.dtype = parse::<DType>(s, key, v)?,
            ("vit", "seed") => self.vit.seed = parse(s, key, v)?,
            ("sae", "m") => {
                self.sae.m = match v.trim() {
                    "auto" => None,
                    x => Some(parse(s, key, x)?),
                }
            }
            ("sae", "lambda") => self.sae.lambda = parse(s, key, v)?,
            ("sae", "lr") => self.sae.lr = parse(s, key, v)?,
            ("sae", "batch_size") => self.sae.batch_size = parse(s, key, v)?,
            ("sae", "steps") => self.sae.steps = parse(s, key, v)?,
            ("sae", "seed") => self.sae.seed = parse(s, key, v)?,
            ("sae", "dead_after") => self.sae.dead_after = parse(s, key, v)?,
            ("sae", "decoder_bias_sign") => self.sae.decoder_bias_sign = parse(s, key, v)?,
            ("sae", "matryoshka_groups") => {
                self.sae.matryoshka_groups = match v.trim() {
                    "none" => None,
                    "default" => {
                        let m = self.sae.m.unwrap_or(2 * self.vit.dim);
                        Some(crate::sae::default_groups(m))
                    }
                    x => Some(list(s, key, x)?),
                }
            }
            ("attribution", "method") => self.attribution.method = parse(s, key, v)?,
            ("attribution", "baseline") => {
                self.attribution.baseline = match v.trim() {
                    "zero" => BaselineKind::Zero,
                    "mean" | "dataset-mean" => BaselineKind::Mean,
                    o => return Err(Error::Config(format!("unknown baseline `{o}`"))),
                }
            }
            ("attribution", "ig_steps") => self.attribution.params.ig_steps = parse(s, key, v)?,
            ("attribution", "shap_samples") => {
                self.attribution.params.shap_samples = parse(s, key, v)?
            }
            ("attribution", "shap_ridge") => self.attribution.params.shap_ridge = parse(s, key, v)?,
            ("attribution", "seed") => self.attribution.params.seed = parse(s, key, v)?,
            ("attribution", "lrp_eps") => {
                self.attribution.params.lrp_eps = match v.trim() {
                    "auto" => None,
                    x => Some(parse(s, key, x)?),
                }
            }
            ("attribution", "attn_rule") => self.attribution.params.attn_rule = parse(s, key, v)?,
            ("attribution", "pooling") => self.attribution.params.pooling = parse(s, key, v)?,
            ("eval", "methods") => self.eval.methods = list(s, key, v)?,
            ("eval", "step") => self.eval.step = parse(s, key, v)?,
            ("eval", "deletion") => self.eval.deletion = parse(s, key, v)?,
            ("eval", "radius") => self.eval.radius = parse(s, key, v)?,
            ("eval", "theta") => self.eval.theta = parse(s, key, v)?,
            ("eval", "n_features") => self.eval.n_features = parse(s, key, v)?,
            ("synthetic", "instances") => self.synthetic.instances = parse(s, key, v)?,
            ("synthetic", "local_instances") => self.synthetic.local_instances = parse(s, key, v)?,
            ("synthetic", "seed") => self.synthetic.seed = parse(s, key, v)?,
            ("synthetic", "image_size") => self.synthetic.image_size = parse(s, key, v)?,
            ("synthetic", "patch_size") => self.synthetic.patch_size = parse(s, key, v)?,
            ("synthetic", "depth") => self.synthetic.depth = parse(s, key, v)?,
            ("synthetic", "heads") => self.synthetic.heads = parse(s, key, v)?,
            ("synthetic", "dim") => self.synthetic.dim = parse(s, key, v)?,
            ("synthetic", "mlp_dim") => self.synthetic.mlp_dim = parse(s, key, v)?,
            ("synthetic", "sae_features") => self.synthetic.sae_features = parse(s, key, v)?,
            ("synthetic", "max_sources") => self.synthetic.max_sources = parse(s, key, v)?,
            ("run" | "vit" | "sae" | "attribution" | "eval" | "synthetic", _) => {
                return Err(Error::Config(format!("unknown key `{key}` in [{section}]")))
            }
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// The effective configuration, every key spelled out.
    pub fn to_ini(&self) -> String {
        let mut ini = Ini::new();
        let opt = |o: Option<String>| o.unwrap_or_else(|| "auto".into());
        ini.with_section(Some("run"))
            .set("out_dir", self.run.out_dir.clone().unwrap_or_default());
        let v = &self.vit;
        ini.with_section(Some("vit"))
            .set("image_size", v.image_size.to_string())
            .set("patch_size", v.patch_size.to_string())
            .set("channels", v.channels.to_string())
            .set("depth", v.depth.to_string())
            .set("heads", v.heads.to_string())
            .set("dim", v.dim.to_string())
            .set("mlp_dim", v.mlp_dim.to_string())
            .set("use_cls_token", v.use_cls_token.to_string())
            .set("layer_norm", v.layer_norm.to_string())
            .set("ln_eps", v.ln_eps.to_string())
            .set("dtype", v.dtype.to_string())
            .set("seed", v.seed.to_string());
        let s = &self.sae;
        ini.with_section(Some("sae"))
            .set("m", opt(s.m.map(|m| m.to_string())))
            .set("lambda", s.lambda.to_string())
            .set("lr", s.lr.to_string())
            .set("batch_size", s.batch_size.to_string())
            .set("steps", s.steps.to_string())
            .set("seed", s.seed.to_string())
            .set("dead_after", s.dead_after.to_string())
            .set("decoder_bias_sign", s.decoder_bias_sign.to_string())
            .set(
                "matryoshka_groups",
                s.matryoshka_groups.as_ref().map_or_else(|| "none".into(), |g| join(g)),
            );
        let a = &self.attribution;
        ini.with_section(Some("attribution"))
            .set("method", a.method.to_string())
            .set(
                "baseline",
                match a.baseline {
                    BaselineKind::Zero => "zero",
                    BaselineKind::Mean => "mean",
                },
            )
            .set("ig_steps", a.params.ig_steps.to_string())
            .set("shap_samples", a.params.shap_samples.to_string())
            .set("shap_ridge", a.params.shap_ridge.to_string())
            .set("seed", a.params.seed.to_string())
            .set("lrp_eps", opt(a.params.lrp_eps.map(|e| e.to_string())))
            .set("attn_rule", a.params.attn_rule.to_string())
            .set("pooling", a.params.pooling.to_string());
        let e = &self.eval;
        ini.with_section(Some("eval"))
            .set("methods", join(&e.methods))
            .set("step", e.step.to_string())
            .set("deletion", e.deletion.to_string())
            .set("radius", e.radius.to_string())
            .set("theta", e.theta.to_string())
            .set("n_features", e.n_features.to_string());
        let y = &self.synthetic;
        ini.with_section(Some("synthetic"))
            .set("instances", y.instances.to_string())
            .set("local_instances", y.local_instances.to_string())
            .set("seed", y.seed.to_string())
            .set("image_size", y.image_size.to_string())
            .set("patch_size", y.patch_size.to_string())
            .set("depth", y.depth.to_string())
            .set("heads", y.heads.to_string())
            .set("dim", y.dim.to_string())
            .set("mlp_dim", y.mlp_dim.to_string())
            .set("sae_features", y.sae_features.to_string())
            .set("max_sources", y.max_sources.to_string());
        let mut out = Vec::new();
        ini.write_to(&mut out).expect("writing to memory");
        String::from_utf8(out).expect("ini output is UTF-8")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_and_sections_are_rejected() {
        assert!(RunConfig::from_ini_str("[vit]\ndepth = 3\n").is_ok());
        let e = RunConfig::from_ini_str("[vit]\ndepht = 3\n").unwrap_err();
        assert!(e.to_string().contains("depht"));
        assert!(RunConfig::from_ini_str("[model]\ndepth = 3\n").is_err());
        assert!(RunConfig::from_ini_str("depth = 3\n").is_err());
        assert!(RunConfig::from_ini_str("[vit]\ndepth = three\n").is_err());
    }

    #[test]
    fn effective_config_round_trips() {
        let mut c = RunConfig::from_ini_str(
            "[sae]\nm = 32\nmatryoshka_groups = 8,16,32\n[eval]\nmethods = activation,attnlrp\ntheta = 0.25\n[attribution]\nlrp_eps = 1e-7\n",
        )
        .unwrap();
        c.set("vit", "dtype", "f32").unwrap();
        assert_eq!(c.sae.matryoshka_groups, Some(vec![8, 16, 32]));
        assert_eq!(c.eval.methods, vec![Ranker::Activation, Ranker::Erf(Method::AttnLrp)]);
        let again = RunConfig::from_ini_str(&c.to_ini()).unwrap();
        assert_eq!(again, c);
        assert_eq!(RunConfig::from_ini_str(&RunConfig::default().to_ini()).unwrap(), RunConfig::default());
    }
}
