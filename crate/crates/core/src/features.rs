//! Kernel-smoother design matrix over representative regimens and its
//! principal-component reduction.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{linear_kernel, prepared_kernel, KernelConfig, PreparedTree};
use crate::linalg::serde_matrix;
use crate::regimen::{build_regimen_tree, DrugDictionary, Regimen};

/// Default share of total variance the retained components must explain.
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.999;
/// Default minimum visit count a regimen must exceed to be representative.
pub const DEFAULT_REP_THRESHOLD: usize = 10;

/// Similarity used for the kernel weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FeatureKernel {
    SubsetTree(KernelConfig),
    Linear,
}

impl Default for FeatureKernel {
    fn default() -> Self {
        FeatureKernel::SubsetTree(KernelConfig::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RepresentativeSet {
    pub regimens: Vec<Regimen>,
    pub min_visit_threshold: usize,
}

impl RepresentativeSet {
    pub fn len(&self) -> usize {
        self.regimens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regimens.is_empty()
    }
}

/// Every regimen used in strictly more than `threshold` visits, in canonical
/// order.
pub fn select_representatives<'a, I>(visits: I, threshold: usize) -> Result<RepresentativeSet>
where
    I: IntoIterator<Item = &'a Regimen>,
{
    let mut counts: BTreeMap<&Regimen, usize> = BTreeMap::new();
    for r in visits {
        *counts.entry(r).or_default() += 1;
    }
    let regimens: Vec<Regimen> = counts
        .into_iter()
        .filter(|&(_, c)| c > threshold)
        .map(|(r, _)| r.clone())
        .collect();
    if regimens.is_empty() {
        return Err(Error::NoRepresentatives { threshold });
    }
    Ok(RepresentativeSet {
        regimens,
        min_visit_threshold: threshold,
    })
}

/// One normalized kernel-weight row. `fallback` marks the uniform row used
/// when the regimen has zero similarity to every representative (or the
/// visit has no regimen at all).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRow {
    pub weights: DVector<f64>,
    pub fallback: bool,
}

/// Computes kernel weights of arbitrary regimens against a fixed set of
/// representatives.
#[derive(Debug, Clone)]
pub struct KernelSmoother {
    kernel: FeatureKernel,
    reps: Vec<Regimen>,
    prepared: Vec<PreparedTree>,
    dict: DrugDictionary,
}

impl KernelSmoother {
    pub fn new(
        reps: &RepresentativeSet,
        kernel: FeatureKernel,
        dict: &DrugDictionary,
    ) -> Result<Self> {
        if reps.is_empty() {
            return Err(Error::NoRepresentatives {
                threshold: reps.min_visit_threshold,
            });
        }
        let prepared = match kernel {
            FeatureKernel::SubsetTree(cfg) => {
                cfg.validate()?;
                reps.regimens
                    .iter()
                    .map(|r| {
                        Ok(PreparedTree::new(
                            &build_regimen_tree(r, dict)?,
                            cfg.match_mode,
                        ))
                    })
                    .collect::<Result<Vec<_>>>()?
            }
            FeatureKernel::Linear => {
                for r in &reps.regimens {
                    r.validate(dict)?;
                }
                Vec::new()
            }
        };
        Ok(Self {
            kernel,
            reps: reps.regimens.clone(),
            prepared,
            dict: dict.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.reps.len()
    }

    pub fn raw_similarities(&self, z: &Regimen) -> Result<DVector<f64>> {
        match self.kernel {
            FeatureKernel::SubsetTree(cfg) => {
                let tree = PreparedTree::new(&build_regimen_tree(z, &self.dict)?, cfg.match_mode);
                Ok(DVector::from_iterator(
                    self.prepared.len(),
                    self.prepared
                        .iter()
                        .map(|r| prepared_kernel(&tree, r, cfg.eta)),
                ))
            }
            FeatureKernel::Linear => {
                z.validate(&self.dict)?;
                Ok(DVector::from_iterator(
                    self.reps.len(),
                    self.reps.iter().map(|r| linear_kernel(z, r)),
                ))
            }
        }
    }

    /// Element `d` is `k(z, z_d) / sum_d k(z, z_d)`.
    pub fn weight_row(&self, z: Option<&Regimen>) -> Result<WeightRow> {
        let d = self.dim();
        let uniform = || WeightRow {
            weights: DVector::from_element(d, 1.0 / d as f64),
            fallback: true,
        };
        let Some(z) = z else {
            return Ok(uniform());
        };
        let sims = self.raw_similarities(z)?;
        let total: f64 = sims.sum();
        if total <= 0.0 {
            return Ok(uniform());
        }
        Ok(WeightRow {
            weights: sims / total,
            fallback: false,
        })
    }
}

/// Convenience wrapper around [`KernelSmoother::weight_row`].
pub fn kernel_weight_row(
    z: &Regimen,
    reps: &RepresentativeSet,
    kernel: FeatureKernel,
    dict: &DrugDictionary,
) -> Result<WeightRow> {
    KernelSmoother::new(reps, kernel, dict)?.weight_row(Some(z))
}

/// N x D kernel-weight design matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelWeightMatrix {
    pub rows: DMatrix<f64>,
    pub fallback: Vec<bool>,
}

impl KernelWeightMatrix {
    pub fn build<'a, I>(smoother: &KernelSmoother, regimens: I) -> Result<Self>
    where
        I: IntoIterator<Item = Option<&'a Regimen>>,
    {
        let mut rows = Vec::new();
        let mut fallback = Vec::new();
        for z in regimens {
            let row = smoother.weight_row(z)?;
            rows.push(row.weights.transpose());
            fallback.push(row.fallback);
        }
        if rows.is_empty() {
            return Err(Error::InvalidData("no visits".into()));
        }
        Ok(Self {
            rows: DMatrix::from_rows(&rows),
            fallback,
        })
    }
}

/// Principal-component basis of a kernel-weight matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaBasis {
    pub column_means: Vec<f64>,
    /// D x D* loadings; columns are orthonormal.
    #[serde(with = "serde_matrix")]
    pub loadings: DMatrix<f64>,
    pub explained_variance_ratio: Vec<f64>,
    pub d_star: usize,
    pub centered: bool,
    /// Set when the input had no variance at all.
    #[serde(default)]
    pub zero_variance: bool,
}

impl PcaBasis {
    pub fn input_dim(&self) -> usize {
        self.loadings.nrows()
    }

    pub fn cumulative_explained(&self) -> f64 {
        self.explained_variance_ratio.iter().sum()
    }

    /// `(row - means) * loadings`.
    pub fn project(&self, row: &DVector<f64>) -> Result<DVector<f64>> {
        if row.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: row.len(),
            });
        }
        let centered = DVector::from_iterator(
            row.len(),
            row.iter().zip(&self.column_means).map(|(x, m)| x - m),
        );
        Ok(self.loadings.tr_mul(&centered))
    }

    pub fn reconstruct(&self, scores: &DVector<f64>) -> Result<DVector<f64>> {
        if scores.len() != self.d_star {
            return Err(Error::DimensionMismatch {
                expected: self.d_star,
                got: scores.len(),
            });
        }
        let mut out = &self.loadings * scores;
        for (o, m) in out.iter_mut().zip(&self.column_means) {
            *o += m;
        }
        Ok(out)
    }

    /// Projects every row of `h`.
    pub fn project_matrix(&self, h: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if h.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: h.ncols(),
            });
        }
        let mut centered = h.clone();
        for (j, m) in self.column_means.iter().enumerate() {
            centered.column_mut(j).add_scalar_mut(-m);
        }
        Ok(centered * &self.loadings)
    }
}

/// Fits a PCA on the rows of `h`, keeping the fewest leading components
/// whose cumulative explained variance reaches `variance_threshold`.
///
/// Columns are mean-centered when `center` is set (never variance-scaled).
/// The sign of each component is fixed so that its largest-magnitude entry
/// is positive.
pub fn pca_fit(h: &DMatrix<f64>, variance_threshold: f64, center: bool) -> Result<PcaBasis> {
    let n = h.nrows();
    let d = h.ncols();
    if n < 2 {
        return Err(Error::InvalidPca(format!("{n} rows")));
    }
    if !(variance_threshold > 0.0 && variance_threshold <= 1.0) {
        return Err(Error::InvalidPca(format!("threshold {variance_threshold}")));
    }
    let column_means: Vec<f64> = if center {
        h.column_iter().map(|c| c.mean()).collect()
    } else {
        vec![0.0; d]
    };
    let mut x = h.clone();
    for (j, m) in column_means.iter().enumerate() {
        x.column_mut(j).add_scalar_mut(-m);
    }
    let mut cov = x.tr_mul(&x) / (n as f64 - 1.0);
    crate::linalg::symmetrize(&mut cov);
    let eig = SymmetricEigen::new(cov);

    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();

    let scale = h.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    if total <= 1e-28 * scale * scale {
        let mut loadings = DMatrix::zeros(d, 1);
        loadings[(0, 0)] = 1.0;
        return Ok(PcaBasis {
            column_means,
            loadings,
            explained_variance_ratio: vec![1.0],
            d_star: 1,
            centered: center,
            zero_variance: true,
        });
    }

    let ratios: Vec<f64> = values.iter().map(|v| v / total).collect();
    let mut cum = 0.0;
    let mut d_star = d;
    for (k, r) in ratios.iter().enumerate() {
        cum += r;
        if cum >= variance_threshold - 1e-12 {
            d_star = k + 1;
            break;
        }
    }

    let mut loadings = DMatrix::zeros(d, d_star);
    for (c, &src) in order.iter().take(d_star).enumerate() {
        let mut v = eig.eigenvectors.column(src).into_owned();
        let (imax, _) = v.iter().enumerate().fold((0, -1.0f64), |best, (i, x)| {
            if x.abs() > best.1 {
                (i, x.abs())
            } else {
                best
            }
        });
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        loadings.set_column(c, &v);
    }

    Ok(PcaBasis {
        column_means,
        loadings,
        explained_variance_ratio: ratios[..d_star].to_vec(),
        d_star,
        centered: center,
        zero_variance: false,
    })
}

/// Representatives, kernel choice and PCA basis: everything needed to map a
/// regimen to a reduced feature row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelFeatureBasis {
    pub kernel: FeatureKernel,
    pub representatives: RepresentativeSet,
    pub pca: PcaBasis,
}

/// Reduced design matrix together with the basis that produced it.
#[derive(Debug, Clone)]
pub struct FeatureMatrix {
    pub basis: KernelFeatureBasis,
    pub weights: KernelWeightMatrix,
    /// N x D* projected rows.
    pub reduced: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FeatureOptions {
    pub rep_threshold: usize,
    pub variance_threshold: f64,
    pub center: bool,
}

impl Default for FeatureOptions {
    fn default() -> Self {
        Self {
            rep_threshold: DEFAULT_REP_THRESHOLD,
            variance_threshold: DEFAULT_VARIANCE_THRESHOLD,
            center: true,
        }
    }
}

impl KernelFeatureBasis {
    /// Selects representatives from the observed visit regimens, builds the
    /// weight matrix and fits the PCA.
    pub fn fit(
        visit_regimens: &[Option<Regimen>],
        dict: &DrugDictionary,
        kernel: FeatureKernel,
        opts: &FeatureOptions,
    ) -> Result<FeatureMatrix> {
        let reps = select_representatives(visit_regimens.iter().flatten(), opts.rep_threshold)?;
        Self::fit_with_representatives(visit_regimens, reps, dict, kernel, opts)
    }

    pub fn fit_with_representatives(
        visit_regimens: &[Option<Regimen>],
        reps: RepresentativeSet,
        dict: &DrugDictionary,
        kernel: FeatureKernel,
        opts: &FeatureOptions,
    ) -> Result<FeatureMatrix> {
        let smoother = KernelSmoother::new(&reps, kernel, dict)?;
        let weights =
            KernelWeightMatrix::build(&smoother, visit_regimens.iter().map(Option::as_ref))?;
        let pca = pca_fit(&weights.rows, opts.variance_threshold, opts.center)?;
        let reduced = pca.project_matrix(&weights.rows)?;
        Ok(FeatureMatrix {
            basis: KernelFeatureBasis {
                kernel,
                representatives: reps,
                pca,
            },
            weights,
            reduced,
        })
    }

    pub fn d_star(&self) -> usize {
        self.pca.d_star
    }

    pub fn smoother(&self, dict: &DrugDictionary) -> Result<KernelSmoother> {
        KernelSmoother::new(&self.representatives, self.kernel, dict)
    }
}

/// Maps regimens to reduced feature rows using a stored basis.
#[derive(Debug, Clone)]
pub struct Featurizer {
    smoother: KernelSmoother,
    pca: PcaBasis,
}

impl Featurizer {
    pub fn new(basis: &KernelFeatureBasis, dict: &DrugDictionary) -> Result<Self> {
        Ok(Self {
            smoother: basis.smoother(dict)?,
            pca: basis.pca.clone(),
        })
    }

    /// Projected feature row and whether the weight row was a fallback.
    pub fn features(&self, z: Option<&Regimen>) -> Result<(DVector<f64>, bool)> {
        let row = self.smoother.weight_row(z)?;
        Ok((self.pca.project(&row.weights)?, row.fallback))
    }
}
