//! Per-project prefix vectors and their reparametrization.
//!
//! For every enabled attention site and layer, a project's prefix is
//! `P = MLP(E)`, where `E` is that project's `prefix_len x d_model`
//! embedding and the MLP (`d_model -> hidden -> d_model`, tanh between) is
//! shared by all projects. After training, [`PrefixParams::drop_mlp`] caches
//! every registered project's `P` and discards `E` and the MLP.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{no_grad, Var};
use crate::error::{Error, Result};
use crate::params::{uniform, Bound, ParamSet};

use super::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Site {
    EncSelf,
    DecSelf,
    DecCross,
}

impl Site {
    pub const ALL: [Site; 3] = [Site::EncSelf, Site::DecSelf, Site::DecCross];

    pub fn key(self) -> &'static str {
        match self {
            Site::EncSelf => "enc_self",
            Site::DecSelf => "dec_self",
            Site::DecCross => "dec_cross",
        }
    }
}

impl fmt::Display for Site {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for Site {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Site::ALL
            .into_iter()
            .find(|site| site.key() == s)
            .ok_or_else(|| Error::Config(format!("unknown prefix site `{s}`")))
    }
}

fn slot(site: Site, layer: usize) -> String {
    format!("{}.{layer}", site.key())
}

/// Prefix vectors keyed by (site, layer), ready for one forward pass.
pub type PrefixVars = BTreeMap<(Site, usize), Var>;

/// Builds prefix variables from a bound project view (see
/// [`PrefixParams::view`]). Cached `*.p` tensors take precedence over the
/// embedding/MLP route.
pub fn prefix_vars(cfg: &ModelConfig, view: &Bound) -> Result<PrefixVars> {
    let mut out = PrefixVars::new();
    if cfg.prefix_len == 0 {
        return Ok(out);
    }
    for site in cfg.enabled_sites() {
        for l in 0..cfg.n_layers {
            let s = slot(site, l);
            let p = if view.contains(&format!("{s}.p")) {
                view.get(&format!("{s}.p"))?.clone()
            } else {
                let g = |n: &str| view.get(&format!("{s}.{n}"));
                let hidden = g("emb")?.matmul(g("w1")?).add_row(g("b1")?).tanh();
                hidden.matmul(g("w2")?).add_row(g("b2")?)
            };
            out.insert((site, l), p);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixParams {
    cfg: ModelConfig,
    mlp: Option<ParamSet>,
    embeddings: BTreeMap<String, ParamSet>,
    cached: BTreeMap<String, ParamSet>,
}

impl PrefixParams {
    /// Fresh shared MLPs and no registered projects.
    pub fn new(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let scale = cfg.prefix_init_scale();
        let mut mlp = ParamSet::new();
        if cfg.prefix_len > 0 {
            let (d, h) = (cfg.d_model, cfg.prefix_mlp_hidden);
            for site in cfg.enabled_sites() {
                for l in 0..cfg.n_layers {
                    let s = slot(site, l);
                    mlp.insert(format!("{s}.w1"), uniform(rng, d, h, scale));
                    mlp.insert(format!("{s}.b1"), Array2::zeros((1, h)));
                    mlp.insert(format!("{s}.w2"), uniform(rng, h, d, scale));
                    mlp.insert(format!("{s}.b2"), Array2::zeros((1, d)));
                }
            }
        }
        PrefixParams { cfg: cfg.clone(), mlp: Some(mlp), embeddings: BTreeMap::new(), cached: BTreeMap::new() }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub(crate) fn from_parts(
        cfg: ModelConfig,
        mlp: Option<ParamSet>,
        embeddings: BTreeMap<String, ParamSet>,
        cached: BTreeMap<String, ParamSet>,
    ) -> Self {
        PrefixParams { cfg, mlp, embeddings, cached }
    }

    pub(crate) fn parts(
        &self,
    ) -> (&Option<ParamSet>, &BTreeMap<String, ParamSet>, &BTreeMap<String, ParamSet>) {
        (&self.mlp, &self.embeddings, &self.cached)
    }

    /// Registered project ids, sorted.
    pub fn projects(&self) -> Vec<String> {
        let mut ids: Vec<String> = self.embeddings.keys().chain(self.cached.keys()).cloned().collect();
        ids.sort();
        ids.dedup();
        ids
    }

    pub fn is_registered(&self, project: &str) -> bool {
        self.embeddings.contains_key(project) || self.cached.contains_key(project)
    }

    pub fn has_mlp(&self) -> bool {
        self.mlp.is_some()
    }

    fn random_embedding(&self, rng: &mut ChaCha8Rng) -> ParamSet {
        let mut emb = ParamSet::new();
        if self.cfg.prefix_len > 0 {
            for site in self.cfg.enabled_sites() {
                for l in 0..self.cfg.n_layers {
                    let e = uniform(rng, self.cfg.prefix_len, self.cfg.d_model, self.cfg.prefix_init_scale());
                    emb.insert(format!("{}.emb", slot(site, l)), e);
                }
            }
        }
        emb
    }

    /// Adds a randomly initialised embedding row for `project`.
    pub fn register_project(&mut self, project: &str, rng: &mut ChaCha8Rng) -> Result<()> {
        if self.mlp.is_none() {
            return Err(Error::Contract("cannot register a project after the MLP was dropped".into()));
        }
        let emb = self.random_embedding(rng);
        self.embeddings.insert(project.to_string(), emb);
        Ok(())
    }

    /// Registers `project` with a copy of `from`'s embedding row.
    pub fn register_copy(&mut self, project: &str, from: &str) -> Result<()> {
        let emb = self.embeddings.get(from).cloned().ok_or_else(|| Error::UnknownProject(from.to_string()))?;
        self.embeddings.insert(project.to_string(), emb);
        Ok(())
    }

    /// `P` for one project, site and layer.
    pub fn compute_prefix(&self, project: &str, site: Site, layer: usize) -> Result<Array2<f64>> {
        if !self.cfg.enabled_sites().contains(&site) || layer >= self.cfg.n_layers || self.cfg.prefix_len == 0 {
            return Err(Error::Contract(format!("no prefix at {site} layer {layer}")));
        }
        let view = self.view(project)?;
        let _g = no_grad();
        let vars = prefix_vars(&self.cfg, &Bound::constants(&view))?;
        Ok(vars[&(site, layer)].value().clone())
    }

    /// Trainable tensors for one project under slot-relative names
    /// (`{site}.{layer}.emb|w1|b1|w2|b2`, or `{site}.{layer}.p` once cached).
    pub fn view(&self, project: &str) -> Result<ParamSet> {
        if let Some(c) = self.cached.get(project) {
            return Ok(c.clone());
        }
        let emb = self.embeddings.get(project).ok_or_else(|| Error::UnknownProject(project.to_string()))?;
        let mlp = self.mlp.as_ref().ok_or_else(|| Error::Contract("prefix MLP was dropped".into()))?;
        let mut v = mlp.clone();
        v.update_from(emb);
        Ok(v)
    }

    /// Writes a (possibly trained) view back.
    pub fn absorb(&mut self, project: &str, view: &ParamSet) -> Result<()> {
        view.check_same_structure(&self.view(project)?)?;
        if let Some(c) = self.cached.get_mut(project) {
            c.update_from(view);
            return Ok(());
        }
        let mut emb = ParamSet::new();
        let mut mlp = ParamSet::new();
        for (n, v) in view.iter() {
            if n.ends_with(".emb") {
                emb.insert(n.clone(), v.clone());
            } else {
                mlp.insert(n.clone(), v.clone());
            }
        }
        self.embeddings.insert(project.to_string(), emb);
        self.mlp = Some(mlp);
        Ok(())
    }

    /// Materializes `P` for every registered project and discards the
    /// embeddings and MLPs.
    pub fn drop_mlp(&mut self) -> Result<()> {
        let projects: Vec<String> = self.embeddings.keys().cloned().collect();
        for p in projects {
            let mut cached = ParamSet::new();
            let view = self.view(&p)?;
            let _g = no_grad();
            for ((site, l), var) in prefix_vars(&self.cfg, &Bound::constants(&view))? {
                cached.insert(format!("{}.p", slot(site, l)), var.value().clone());
            }
            self.cached.insert(p, cached);
        }
        self.embeddings.clear();
        self.mlp = None;
        Ok(())
    }

    /// Scalar count of all stored prefix tensors (MLPs, embeddings, caches).
    pub fn num_params(&self) -> usize {
        self.mlp.as_ref().map_or(0, ParamSet::num_scalars)
            + self.embeddings.values().map(ParamSet::num_scalars).sum::<usize>()
            + self.cached.values().map(ParamSet::num_scalars).sum::<usize>()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::rng;

    fn small() -> ModelConfig {
        ModelConfig { n_layers: 2, d_model: 8, n_heads: 2, d_ff: 16, prefix_len: 3, prefix_mlp_hidden: 6, ..ModelConfig::tiny() }
    }

    #[test]
    fn compute_prefix_is_deterministic_and_project_specific() {
        let cfg = small();
        let mut r = rng(1);
        let mut phi = PrefixParams::new(&cfg, &mut r);
        phi.register_project("a", &mut r).unwrap();
        phi.register_project("b", &mut r).unwrap();
        let a1 = phi.compute_prefix("a", Site::DecCross, 1).unwrap();
        let a2 = phi.compute_prefix("a", Site::DecCross, 1).unwrap();
        let b = phi.compute_prefix("b", Site::DecCross, 1).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(a1.dim(), (3, 8));
        assert_ne!(a1, b);
        assert!(matches!(phi.compute_prefix("zzz", Site::EncSelf, 0), Err(Error::UnknownProject(_))));
    }

    #[test]
    fn drop_mlp_caches_bit_identical_prefixes() {
        let cfg = small();
        let mut r = rng(2);
        let mut phi = PrefixParams::new(&cfg, &mut r);
        phi.register_project("a", &mut r).unwrap();
        let before: Vec<_> = Site::ALL
            .iter()
            .flat_map(|&s| (0..2).map(move |l| (s, l)))
            .map(|(s, l)| phi.compute_prefix("a", s, l).unwrap())
            .collect();
        phi.drop_mlp().unwrap();
        assert!(!phi.has_mlp());
        let after: Vec<_> = Site::ALL
            .iter()
            .flat_map(|&s| (0..2).map(move |l| (s, l)))
            .map(|(s, l)| phi.compute_prefix("a", s, l).unwrap())
            .collect();
        assert_eq!(before, after);
        // prefix_len x d_model x sites x layers
        assert_eq!(phi.num_params(), 3 * 8 * 3 * 2);
        assert!(phi.register_project("b", &mut r).is_err());
    }

    #[test]
    fn view_absorb_roundtrip_and_copy_registration() {
        let cfg = small();
        let mut r = rng(3);
        let mut phi = PrefixParams::new(&cfg, &mut r);
        phi.register_project("a", &mut r).unwrap();
        let mut v = phi.view("a").unwrap();
        v.get_mut("enc_self.0.emb").unwrap()[[0, 0]] = 42.0;
        v.get_mut("dec_self.1.w1").unwrap()[[0, 0]] = -7.0;
        phi.absorb("a", &v).unwrap();
        assert_eq!(phi.view("a").unwrap(), v);
        phi.register_copy("t", "a").unwrap();
        assert_eq!(phi.view("t").unwrap(), v);
        assert_eq!(phi.projects(), vec!["a".to_string(), "t".to_string()]);
        let mut bad = v.clone();
        bad.remove("enc_self.0.emb");
        assert!(phi.absorb("a", &bad).is_err());
    }

    #[test]
    fn zero_prefix_len_has_no_tensors() {
        let cfg = ModelConfig { prefix_len: 0, ..small() };
        let mut r = rng(4);
        let mut phi = PrefixParams::new(&cfg, &mut r);
        phi.register_project("a", &mut r).unwrap();
        assert_eq!(phi.num_params(), 0);
        assert!(prefix_vars(&cfg, &Bound::constants(&phi.view("a").unwrap())).unwrap().is_empty());
    }
}
