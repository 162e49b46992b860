//! Zero-inflated negative binomial sampler for labeled synthetic data.

use rand::Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Poisson};
use serde::{Deserialize, Serialize};

use sparseprior_core::seeding::{stream_rng, Stream};

/// One count for every cluster, or one per cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CellsPerCluster {
    Same(usize),
    Each(Vec<usize>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    #[serde(default = "d_clusters")]
    pub clusters: usize,
    #[serde(default = "d_cells")]
    pub cells_per_cluster: CellsPerCluster,
    #[serde(default = "d_genes")]
    pub genes: usize,
    /// Per-cluster relative expression, `clusters × genes`. Generated from
    /// the marker settings below when absent.
    #[serde(default)]
    pub profiles: Option<Vec<Vec<f64>>>,
    /// Genes up-regulated per cluster in generated profiles.
    #[serde(default = "d_markers")]
    pub markers_per_cluster: usize,
    #[serde(default = "d_fold")]
    pub marker_fold: f64,
    /// NB dispersion; 0 gives Poisson counts.
    #[serde(default = "d_alpha")]
    pub alpha: f64,
    /// Dropout logit; each entry is zeroed with probability `sigmoid(l)`.
    #[serde(default = "d_logit")]
    pub dropout_logit: f64,
    /// Mean and sd of the log library size.
    #[serde(default = "d_lib_mu")]
    pub library_log_mean: f64,
    #[serde(default = "d_lib_sd")]
    pub library_log_sd: f64,
    #[serde(default)]
    pub seed: u64,
}

fn d_clusters() -> usize {
    3
}
fn d_cells() -> CellsPerCluster {
    CellsPerCluster::Same(100)
}
fn d_genes() -> usize {
    200
}
fn d_markers() -> usize {
    20
}
fn d_fold() -> f64 {
    6.0
}
fn d_alpha() -> f64 {
    0.2
}
fn d_logit() -> f64 {
    // π = 0.4
    (0.4f64 / 0.6).ln()
}
fn d_lib_mu() -> f64 {
    (5000f64).ln()
}
fn d_lib_sd() -> f64 {
    0.3
}

impl Default for SynthSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("every field has a default")
    }
}

#[derive(Debug, thiserror::Error)]
#[error("invalid synth spec: {0}")]
pub struct SpecError(pub String);

pub struct SynthData {
    pub cell_ids: Vec<String>,
    pub gene_ids: Vec<String>,
    pub labels: Vec<usize>,
    pub counts: Vec<Vec<u64>>,
}

fn bad(msg: impl Into<String>) -> SpecError {
    SpecError(msg.into())
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), SpecError> {
        if self.clusters == 0 || self.genes == 0 {
            return Err(bad("clusters and genes must be positive"));
        }
        if let CellsPerCluster::Each(v) = &self.cells_per_cluster {
            if v.len() != self.clusters {
                return Err(bad(format!("{} cell counts for {} clusters", v.len(), self.clusters)));
            }
        }
        if self.cluster_sizes().contains(&0) {
            return Err(bad("every cluster needs at least one cell"));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(bad("alpha must be finite and non-negative"));
        }
        if self.dropout_logit.is_nan() {
            return Err(bad("dropout_logit is NaN"));
        }
        if !self.library_log_mean.is_finite() || !(self.library_log_sd >= 0.0 && self.library_log_sd.is_finite()) {
            return Err(bad("library parameters must be finite with non-negative sd"));
        }
        match &self.profiles {
            Some(p) => {
                if p.len() != self.clusters || p.iter().any(|r| r.len() != self.genes) {
                    return Err(bad("profiles must be clusters × genes"));
                }
                if p.iter().flatten().any(|v| !(*v >= 0.0 && v.is_finite())) || p.iter().any(|r| r.iter().sum::<f64>() <= 0.0) {
                    return Err(bad("profiles must be non-negative with a positive sum per cluster"));
                }
                let norm = normalize(p);
                for a in 0..norm.len() {
                    for b in a + 1..norm.len() {
                        if norm[a] == norm[b] {
                            return Err(bad(format!("clusters {a} and {b} have identical profiles")));
                        }
                    }
                }
            }
            None => {
                if self.clusters > 1 && (self.markers_per_cluster == 0 || !(self.marker_fold > 1.0)) {
                    return Err(bad("generated profiles need markers_per_cluster > 0 and marker_fold > 1"));
                }
                if self.markers_per_cluster * self.clusters > self.genes {
                    return Err(bad("not enough genes for disjoint marker blocks"));
                }
            }
        }
        Ok(())
    }

    pub fn cluster_sizes(&self) -> Vec<usize> {
        match &self.cells_per_cluster {
            CellsPerCluster::Same(n) => vec![*n; self.clusters],
            CellsPerCluster::Each(v) => v.clone(),
        }
    }

    pub fn dropout(&self) -> f64 {
        1.0 / (1.0 + (-self.dropout_logit).exp())
    }

    fn generated_profiles(&self, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let base_dist = LogNormal::new(0.0, 0.5).expect("valid");
        let base: Vec<f64> = (0..self.genes).map(|_| base_dist.sample(rng)).collect();
        let m = self.markers_per_cluster;
        let raw: Vec<Vec<f64>> = (0..self.clusters)
            .map(|k| {
                base.iter()
                    .enumerate()
                    .map(|(g, &b)| if g >= k * m && g < (k + 1) * m { b * self.marker_fold } else { b })
                    .collect()
            })
            .collect();
        normalize(&raw)
    }

    pub fn sample(&self) -> Result<SynthData, SpecError> {
        self.validate()?;
        let mut rng = stream_rng(self.seed, Stream::Synth);
        let profiles = match &self.profiles {
            Some(p) => normalize(p),
            None => self.generated_profiles(&mut rng),
        };
        let library = LogNormal::new(self.library_log_mean, self.library_log_sd).map_err(|e| bad(e.to_string()))?;
        let pi = self.dropout();
        let sizes = self.cluster_sizes();
        let n: usize = sizes.iter().sum();
        let width = n.to_string().len();
        let mut labels = Vec::with_capacity(n);
        let mut counts = Vec::with_capacity(n);
        for (k, &size) in sizes.iter().enumerate() {
            for _ in 0..size {
                let l = library.sample(&mut rng);
                let row = profiles[k].iter().map(|&p| nb_draw(&mut rng, l * p, self.alpha)).collect::<Vec<_>>();
                let row = row
                    .into_iter()
                    .map(|x| if rng.random::<f64>() < pi { 0 } else { x })
                    .collect();
                labels.push(k);
                counts.push(row);
            }
        }
        Ok(SynthData {
            cell_ids: (0..n).map(|i| format!("cell{i:0width$}")).collect(),
            gene_ids: (0..self.genes).map(|g| format!("gene{g:0w$}", w = self.genes.to_string().len())).collect(),
            labels,
            counts,
        })
    }
}

fn normalize(p: &[Vec<f64>]) -> Vec<Vec<f64>> {
    p.iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            r.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Gamma-Poisson draw with mean `mu` and variance `mu + alpha mu²`.
fn nb_draw(rng: &mut impl Rng, mu: f64, alpha: f64) -> u64 {
    if mu <= 0.0 {
        return 0;
    }
    let rate = if alpha > 0.0 {
        Gamma::new(1.0 / alpha, mu * alpha).expect("positive parameters").sample(rng)
    } else {
        mu
    };
    if rate <= 0.0 {
        return 0;
    }
    Poisson::new(rate).expect("positive rate").sample(rng) as u64
}
