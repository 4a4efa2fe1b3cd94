//! Data containers, parameters and likelihood of the mixture model
//!
//! `Y_ij ~ N(beta_i X_ij + gamma_i H_ij + omega_ij, sigma_eps2 I_Q)` with
//! `omega_ij ~ N(0, sigma_eps2 Sigma_omega)` and cluster-shared
//! `(beta_i, gamma_i)`.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{identity_scaled, serde_matrix, serde_matrix_vec, serde_vector_vec};
use crate::regimen::{DrugDictionary, Regimen, RegimenHistory};

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Visit {
    pub visit_index: i64,
    pub y: Vec<f64>,
    pub x: Vec<f64>,
    /// `None` when no treatment was recorded at the visit.
    pub regimen: Option<Regimen>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Individual {
    pub id: String,
    pub visits: Vec<Visit>,
}

impl Individual {
    pub fn history(&self, keep_duplicates: bool) -> RegimenHistory {
        RegimenHistory::from_visits(
            self.id.clone(),
            self.visits.iter().map(|v| v.regimen.as_ref()),
            keep_duplicates,
        )
    }
}

/// Outcomes, covariates and regimens for `n` individuals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LongitudinalDataset {
    pub individuals: Vec<Individual>,
    pub item_names: Vec<String>,
    pub covariate_names: Vec<String>,
}

impl LongitudinalDataset {
    pub fn new(
        individuals: Vec<Individual>,
        item_names: Vec<String>,
        covariate_names: Vec<String>,
    ) -> Result<Self> {
        let ds = Self {
            individuals,
            item_names,
            covariate_names,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let (q, s) = (self.q(), self.s());
        if self.individuals.is_empty() {
            return Err(Error::InvalidData("no individuals".into()));
        }
        if q == 0 || s == 0 {
            return Err(Error::InvalidData(
                "need at least one outcome and one covariate".into(),
            ));
        }
        let mut seen = std::collections::HashSet::new();
        for ind in &self.individuals {
            if !seen.insert(&ind.id) {
                return Err(Error::InvalidData(format!(
                    "duplicate individual `{}`",
                    ind.id
                )));
            }
            if ind.visits.is_empty() {
                return Err(Error::InvalidData(format!(
                    "individual `{}` has no visits",
                    ind.id
                )));
            }
            for v in &ind.visits {
                if v.y.len() != q {
                    return Err(Error::DimensionMismatch {
                        expected: q,
                        got: v.y.len(),
                    });
                }
                if v.x.len() != s {
                    return Err(Error::DimensionMismatch {
                        expected: s,
                        got: v.x.len(),
                    });
                }
                if v.y.iter().chain(&v.x).any(|a| !a.is_finite()) {
                    return Err(Error::InvalidData(format!(
                        "non-finite value for `{}` visit {}",
                        ind.id, v.visit_index
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.individuals.len()
    }

    pub fn q(&self) -> usize {
        self.item_names.len()
    }

    pub fn s(&self) -> usize {
        self.covariate_names.len()
    }

    /// Total visit count `N`.
    pub fn n_visits(&self) -> usize {
        self.individuals.iter().map(|i| i.visits.len()).sum()
    }

    /// Per-visit regimens in individual-major order.
    pub fn visit_regimens(&self) -> Vec<Option<Regimen>> {
        self.individuals
            .iter()
            .flat_map(|i| i.visits.iter().map(|v| v.regimen.clone()))
            .collect()
    }

    pub fn histories(&self, keep_duplicates: bool) -> Vec<RegimenHistory> {
        self.individuals
            .iter()
            .map(|i| i.history(keep_duplicates))
            .collect()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.individuals.iter().position(|i| i.id == id)
    }

    /// Reads the visits CSV `individual_id,visit_index,regimen,y..,x..`.
    /// Outcome columns are those named with a leading `y`; the remaining
    /// trailing columns are covariates.
    pub fn from_csv_reader<R: Read>(reader: R, dict: &DrugDictionary) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        if cols.len() < 5
            || cols[0] != "individual_id"
            || cols[1] != "visit_index"
            || cols[2] != "regimen"
        {
            return Err(Error::Parse(
                "visits header must start with individual_id,visit_index,regimen".into(),
            ));
        }
        let rest = &cols[3..];
        let q = rest.iter().take_while(|c| c.starts_with('y')).count();
        let item_names: Vec<String> = rest[..q].iter().map(|s| s.to_string()).collect();
        let covariate_names: Vec<String> = rest[q..].iter().map(|s| s.to_string()).collect();

        let mut order: Vec<String> = Vec::new();
        let mut by_id: HashMap<String, Vec<Visit>> = HashMap::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let id = rec[0].to_string();
            let visit_index: i64 = rec[1].trim().parse().map_err(|_| {
                Error::Parse(format!("row {}: bad visit_index `{}`", line + 2, &rec[1]))
            })?;
            let reg_text = rec[2].trim();
            let regimen = if reg_text.is_empty() {
                None
            } else {
                Some(Regimen::parse(reg_text, dict)?)
            };
            let nums = (3..rec.len())
                .map(|c| {
                    rec[c].trim().parse::<f64>().map_err(|_| {
                        Error::Parse(format!("row {}: bad number `{}`", line + 2, &rec[c]))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            if !by_id.contains_key(&id) {
                order.push(id.clone());
            }
            by_id.entry(id).or_default().push(Visit {
                visit_index,
                y: nums[..q].to_vec(),
                x: nums[q..].to_vec(),
                regimen,
            });
        }
        let individuals = order
            .into_iter()
            .map(|id| {
                let mut visits = by_id.remove(&id).unwrap_or_default();
                visits.sort_by_key(|v| v.visit_index);
                Individual { id, visits }
            })
            .collect();
        Self::new(individuals, item_names, covariate_names)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, dict: &DrugDictionary) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?, dict)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec![
            "individual_id".to_string(),
            "visit_index".into(),
            "regimen".into(),
        ];
        header.extend(self.item_names.iter().cloned());
        header.extend(self.covariate_names.iter().cloned());
        w.write_record(&header)?;
        for ind in &self.individuals {
            for v in &ind.visits {
                let mut row = vec![
                    ind.id.clone(),
                    v.visit_index.to_string(),
                    v.regimen
                        .as_ref()
                        .map(|r| r.to_string())
                        .unwrap_or_default(),
                ];
                row.extend(v.y.iter().chain(&v.x).map(|a| format!("{a:?}")));
                w.write_record(&row)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path(&self, path: impl AsRef<Path>) -> Result<()> {
        self.write_csv(std::fs::File::create(path)?)
    }
}

/// Writes a similarity matrix as CSV with individual ids as header and
/// first column.
pub fn write_similarity_csv<W: Write>(sim: &DMatrix<f64>, ids: &[String], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec![String::from("individual_id")];
    header.extend(ids.iter().cloned());
    w.write_record(&header)?;
    for (i, id) in ids.iter().enumerate() {
        let mut row = vec![id.clone()];
        row.extend((0..sim.ncols()).map(|j| format!("{:?}", sim[(i, j)])));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Dense design in visit-major layout with per-individual sufficient
/// statistics cached for the conjugate updates.
#[derive(Debug, Clone)]
pub struct ModelData {
    /// N x Q outcomes.
    pub y: DMatrix<f64>,
    /// N x S covariates.
    pub x: DMatrix<f64>,
    /// N x D* reduced kernel features.
    pub h: DMatrix<f64>,
    pub ranges: Vec<Range<usize>>,
    pub xtx: Vec<DMatrix<f64>>,
    pub hth: Vec<DMatrix<f64>>,
    pub xth: Vec<DMatrix<f64>>,
}

impl ModelData {
    pub fn new(
        y: DMatrix<f64>,
        x: DMatrix<f64>,
        h: DMatrix<f64>,
        visits_per_individual: &[usize],
    ) -> Result<Self> {
        let n_visits: usize = visits_per_individual.iter().sum();
        for (m, what) in [(&y, "outcome"), (&x, "covariate"), (&h, "feature")] {
            if m.nrows() != n_visits {
                return Err(Error::InvalidData(format!(
                    "{what} matrix has {} rows for {n_visits} visits",
                    m.nrows()
                )));
            }
        }
        if visits_per_individual.iter().any(|&j| j == 0) {
            return Err(Error::InvalidData("individual without visits".into()));
        }
        let mut ranges = Vec::with_capacity(visits_per_individual.len());
        let mut start = 0;
        for &j in visits_per_individual {
            ranges.push(start..start + j);
            start += j;
        }
        let mut data = Self {
            y,
            x,
            h,
            ranges,
            xtx: Vec::new(),
            hth: Vec::new(),
            xth: Vec::new(),
        };
        data.refresh_design_cache();
        Ok(data)
    }

    pub fn from_dataset(ds: &LongitudinalDataset, features: &DMatrix<f64>) -> Result<Self> {
        let n_visits = ds.n_visits();
        let (q, s) = (ds.q(), ds.s());
        let mut y = DMatrix::zeros(n_visits, q);
        let mut x = DMatrix::zeros(n_visits, s);
        let mut row = 0;
        for ind in &ds.individuals {
            for v in &ind.visits {
                for (c, val) in v.y.iter().enumerate() {
                    y[(row, c)] = *val;
                }
                for (c, val) in v.x.iter().enumerate() {
                    x[(row, c)] = *val;
                }
                row += 1;
            }
        }
        let counts: Vec<usize> = ds.individuals.iter().map(|i| i.visits.len()).collect();
        Self::new(y, x, features.clone(), &counts)
    }

    fn refresh_design_cache(&mut self) {
        self.xtx.clear();
        self.hth.clear();
        self.xth.clear();
        for r in &self.ranges {
            let xi = self.x.rows(r.start, r.len());
            let hi = self.h.rows(r.start, r.len());
            self.xtx.push(xi.tr_mul(&xi));
            self.hth.push(hi.tr_mul(&hi));
            self.xth.push(xi.tr_mul(&hi));
        }
    }

    pub fn n(&self) -> usize {
        self.ranges.len()
    }

    pub fn n_visits(&self) -> usize {
        self.y.nrows()
    }

    pub fn q(&self) -> usize {
        self.y.ncols()
    }

    pub fn s(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_star(&self) -> usize {
        self.h.ncols()
    }
}

/// `(beta_k, gamma_k)` of one cluster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterParams {
    /// Q x S.
    #[serde(with = "serde_matrix")]
    pub beta: DMatrix<f64>,
    /// Q x D*.
    #[serde(with = "serde_matrix")]
    pub gamma: DMatrix<f64>,
}

impl ClusterParams {
    pub fn zeros(q: usize, s: usize, d_star: usize) -> Self {
        Self {
            beta: DMatrix::zeros(q, s),
            gamma: DMatrix::zeros(q, d_star),
        }
    }

    /// Mean of visit `row` without the noise terms.
    pub fn mean(&self, data: &ModelData, row: usize) -> DVector<f64> {
        &self.beta * data.x.row(row).transpose() + &self.gamma * data.h.row(row).transpose()
    }

    pub fn is_finite(&self) -> bool {
        self.beta
            .iter()
            .chain(self.gamma.iter())
            .all(|v| v.is_finite())
    }
}

/// `h(Z) = gamma * h_row`.
pub fn combination_effect(gamma: &DMatrix<f64>, h_row: &DVector<f64>) -> Result<DVector<f64>> {
    if gamma.ncols() != h_row.len() {
        return Err(Error::DimensionMismatch {
            expected: gamma.ncols(),
            got: h_row.len(),
        });
    }
    Ok(gamma * h_row)
}

/// Fixed hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hyperparams {
    pub c0: f64,
    pub d0: f64,
    pub g1: f64,
    pub g2: f64,
    /// Prior covariance of `e_q`.
    #[serde(with = "serde_matrix")]
    pub e0: DMatrix<f64>,
    pub b0: f64,
    /// Inverse-Wishart scale matrix for `B_q`.
    #[serde(with = "serde_matrix")]
    pub b0_scale: DMatrix<f64>,
    /// Prior covariance of `f_q`.
    #[serde(with = "serde_matrix")]
    pub f0: DMatrix<f64>,
    pub lambda0: f64,
    /// Inverse-Wishart scale matrix for `Lambda_q`.
    #[serde(with = "serde_matrix")]
    pub lambda0_scale: DMatrix<f64>,
}

impl Hyperparams {
    /// `c0 = d0 = g1 = g2 = 1`, `E0 = 100 I`, `b0 = S + 1`, `B0 = I / 100`,
    /// `F0 = 100 I`, `lambda0 = D* + 1`, `Lambda0 = I / 100`.
    pub fn defaults(s: usize, d_star: usize) -> Self {
        Self {
            c0: 1.0,
            d0: 1.0,
            g1: 1.0,
            g2: 1.0,
            e0: identity_scaled(s, 100.0),
            b0: s as f64 + 1.0,
            b0_scale: identity_scaled(s, 0.01),
            f0: identity_scaled(d_star, 100.0),
            lambda0: d_star as f64 + 1.0,
            lambda0_scale: identity_scaled(d_star, 0.01),
        }
    }

    pub fn s(&self) -> usize {
        self.e0.nrows()
    }

    pub fn d_star(&self) -> usize {
        self.f0.nrows()
    }

    pub fn validate(&self) -> Result<()> {
        let (s, d) = (self.s(), self.d_star());
        for (v, name) in [
            (self.c0, "c0"),
            (self.d0, "d0"),
            (self.g1, "g1"),
            (self.g2, "g2"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.b0 <= s as f64 - 1.0 {
            return Err(Error::InvalidConfig(format!(
                "b0 must exceed {}",
                s as f64 - 1.0
            )));
        }
        if self.lambda0 <= d as f64 - 1.0 {
            return Err(Error::InvalidConfig(format!(
                "lambda0 must exceed {}",
                d as f64 - 1.0
            )));
        }
        for (m, dim, name) in [
            (&self.e0, s, "E0"),
            (&self.b0_scale, s, "B0"),
            (&self.f0, d, "F0"),
            (&self.lambda0_scale, d, "Lambda0"),
        ] {
            if m.nrows() != dim || m.ncols() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: m.nrows(),
                });
            }
            if m != &m.transpose() || !crate::linalg::is_positive_definite(m) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be symmetric positive definite"
                )));
            }
        }
        Ok(())
    }
}

/// Per-item latent means and covariances of the base measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentHyper {
    #[serde(with = "serde_vector_vec")]
    pub e: Vec<DVector<f64>>,
    #[serde(with = "serde_matrix_vec")]
    pub b: Vec<DMatrix<f64>>,
    #[serde(with = "serde_vector_vec")]
    pub f: Vec<DVector<f64>>,
    #[serde(with = "serde_matrix_vec")]
    pub lambda: Vec<DMatrix<f64>>,
}

impl LatentHyper {
    /// Zero means and the prior mode-like covariances `scale / (df + dim + 1)`.
    pub fn initial(q: usize, hyper: &Hyperparams) -> Self {
        let (s, d) = (hyper.s(), hyper.d_star());
        let b = &hyper.b0_scale / (hyper.b0 + s as f64 + 1.0);
        let l = &hyper.lambda0_scale / (hyper.lambda0 + d as f64 + 1.0);
        Self {
            e: vec![DVector::zeros(s); q],
            b: vec![b; q],
            f: vec![DVector::zeros(d); q],
            lambda: vec![l; q],
        }
    }

    pub fn q(&self) -> usize {
        self.e.len()
    }
}

/// Correlated noise state.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseState {
    /// N x Q.
    pub omega: DMatrix<f64>,
    /// Q x Q correlation matrix.
    pub sigma_omega: DMatrix<f64>,
    pub sigma_eps2: f64,
}

impl NoiseState {
    pub fn zeros(n_visits: usize, q: usize) -> Self {
        Self {
            omega: DMatrix::zeros(n_visits, q),
            sigma_omega: DMatrix::identity(q, q),
            sigma_eps2: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let q = self.sigma_omega.nrows();
        if !(self.sigma_eps2 > 0.0 && self.sigma_eps2.is_finite()) {
            return Err(Error::NonFiniteState("sigma_eps2"));
        }
        for i in 0..q {
            if self.sigma_omega[(i, i)] != 1.0 {
                return Err(Error::InvalidConfig(
                    "correlation diagonal must be 1".into(),
                ));
            }
        }
        if self.sigma_omega != self.sigma_omega.transpose()
            || !crate::linalg::is_positive_definite(&self.sigma_omega)
        {
            return Err(Error::InvalidConfig(
                "correlation matrix must be symmetric positive definite".into(),
            ));
        }
        Ok(())
    }
}

/// Residual `Y_ij - beta X_ij - gamma H_ij - omega_ij` for visit `row`.
pub fn visit_residual(
    data: &ModelData,
    params: &ClusterParams,
    omega: &DMatrix<f64>,
    row: usize,
) -> DVector<f64> {
    data.y.row(row).transpose() - params.mean(data, row) - omega.row(row).transpose()
}

/// `sum_ij log N(Y_ij; beta_i X_ij + gamma_i H_ij + omega_ij, sigma_eps2 I)`.
pub fn log_likelihood(
    data: &ModelData,
    labels: &[usize],
    clusters: &[ClusterParams],
    noise: &NoiseState,
) -> Result<f64> {
    if labels.len() != data.n() {
        return Err(Error::DimensionMismatch {
            expected: data.n(),
            got: labels.len(),
        });
    }
    let s2 = noise.sigma_eps2;
    let mut sse = 0.0;
    for (i, r) in data.ranges.iter().enumerate() {
        let params = clusters.get(labels[i]).ok_or_else(|| {
            Error::InvalidPartition(format!("label {} has no parameters", labels[i]))
        })?;
        for row in r.clone() {
            sse += visit_residual(data, params, &noise.omega, row).norm_squared();
        }
    }
    let nq = (data.n_visits() * data.q()) as f64;
    let ll = -0.5 * nq * (LN_2PI + s2.ln()) - 0.5 * sse / s2;
    if !ll.is_finite() {
        return Err(Error::NonFiniteLikelihood);
    }
    Ok(ll)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_data(y: f64) -> ModelData {
        ModelData::new(
            DMatrix::from_element(1, 1, y),
            DMatrix::from_element(1, 1, 1.0),
            DMatrix::from_element(1, 1, 0.0),
            &[1],
        )
        .unwrap()
    }

    #[test]
    fn likelihood_zero_residual() {
        let data = tiny_data(0.0);
        let noise = NoiseState::zeros(1, 1);
        let ll = log_likelihood(&data, &[0], &[ClusterParams::zeros(1, 1, 1)], &noise).unwrap();
        assert!((ll + 0.5 * (2.0 * std::f64::consts::PI).ln()).abs() < 1e-14);
    }

    #[test]
    fn doubling_variance_costs_half_log_two_per_value() {
        let data = tiny_data(0.0);
        let mut noise = NoiseState::zeros(1, 1);
        let c = [ClusterParams::zeros(1, 1, 1)];
        let a = log_likelihood(&data, &[0], &c, &noise).unwrap();
        noise.sigma_eps2 = 2.0;
        let b = log_likelihood(&data, &[0], &c, &noise).unwrap();
        assert!((a - b - 0.5 * 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn combination_effect_arithmetic() {
        let g = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        let v = combination_effect(&g, &DVector::from_vec(vec![0.3, 0.1])).unwrap();
        assert!((v[0] - 0.2).abs() < 1e-15);
        assert!(combination_effect(&g, &DVector::zeros(3)).is_err());
        assert_eq!(
            combination_effect(&DMatrix::zeros(2, 2), &DVector::from_vec(vec![0.3, 0.1])).unwrap(),
            DVector::zeros(2)
        );
    }

    #[test]
    fn default_hyperparams_are_valid() {
        let h = Hyperparams::defaults(3, 5);
        h.validate().unwrap();
        assert_eq!(h.b0, 4.0);
        assert_eq!(h.lambda0, 6.0);
        let bad = Hyperparams { b0: 1.0, ..h };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn visits_csv_round_trip() {
        let dict = DrugDictionary::wihs();
        let text = "individual_id,visit_index,regimen,y1,y2,x1,x2\n\
                    a,2,D4T+LAM+EFV,1.5,2,1,0.3\n\
                    a,1,,0.5,1,1,-0.2\n\
                    b,1,FTC+TDF+ATZ+RTV,3,4,1,1\n";
        let ds = LongitudinalDataset::from_csv_reader(text.as_bytes(), &dict).unwrap();
        assert_eq!((ds.n(), ds.q(), ds.s(), ds.n_visits()), (2, 2, 2, 3));
        assert_eq!(ds.individuals[0].visits[0].visit_index, 1);
        assert!(ds.individuals[0].visits[0].regimen.is_none());
        assert_eq!(ds.histories(false)[0].len(), 1);
        let mut buf = Vec::new();
        ds.write_csv(&mut buf).unwrap();
        let back = LongitudinalDataset::from_csv_reader(buf.as_slice(), &dict).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn unknown_drug_in_visits_is_rejected() {
        let text = "individual_id,visit_index,regimen,y1,x1\na,1,XXX,1,1\n";
        let err = LongitudinalDataset::from_csv_reader(text.as_bytes(), &DrugDictionary::wihs())
            .unwrap_err();
        assert_eq!(err, Error::UnknownDrug("XXX".into()));
    }
}
