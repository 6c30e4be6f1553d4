//! Centered piecewise-linear spline basis for the differential value.
//!
//! Knots are the sample deciles of each state component. Every knot gives two
//! hinge atoms, `(s_j - c)+` and `(c - s_j)+`; the basis consists of every
//! single atom and every product of two distinct atoms. Basis functions that
//! vanish on too many training states are dropped, exact duplicates (equal on
//! every training state) are removed, and the survivors are centered by their
//! training mean.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::Dataset;

/// Knots per state component.
pub const N_KNOTS: usize = 10;

/// Fraction of training states on which a basis function may vanish before it
/// is pruned.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnotGrid {
    /// `knots[j]` holds the knots of state component `j`, non-decreasing.
    pub knots: Vec<Vec<f64>>,
}

impl KnotGrid {
    pub fn dim(&self) -> usize {
        self.knots.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    /// `(s_j - c)+`
    Plus,
    /// `(c - s_j)+`
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Hinge {
    pub dim: usize,
    pub knot: usize,
    pub orientation: Orientation,
}

impl Hinge {
    #[inline]
    pub fn eval(&self, grid: &KnotGrid, state: &[f64]) -> f64 {
        let c = grid.knots[self.dim][self.knot];
        let u = match self.orientation {
            Orientation::Plus => state[self.dim] - c,
            Orientation::Minus => c - state[self.dim],
        };
        u.max(0.0)
    }

    fn atom_index(&self, n_knots: usize) -> usize {
        (self.dim * n_knots + self.knot) * 2 + usize::from(self.orientation == Orientation::Minus)
    }

    fn from_atom_index(idx: usize, n_knots: usize) -> Hinge {
        Hinge {
            dim: idx / 2 / n_knots,
            knot: (idx / 2) % n_knots,
            orientation: if idx.is_multiple_of(2) { Orientation::Plus } else { Orientation::Minus },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BasisFunction {
    Singleton(Hinge),
    Product(Hinge, Hinge),
}

impl BasisFunction {
    pub fn eval(&self, grid: &KnotGrid, state: &[f64]) -> f64 {
        match self {
            BasisFunction::Singleton(h) => h.eval(grid, state),
            BasisFunction::Product(a, b) => a.eval(grid, state) * b.eval(grid, state),
        }
    }
}

/// Fitted feature map `s -> f(s)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub knot_grid: KnotGrid,
    pub basis: Vec<BasisFunction>,
    pub centering_means: Vec<f64>,
}

/// Type-7 sample quantile (linear interpolation between order statistics) of
/// already sorted data.
fn quantile_sorted(sorted: &[f64], prob: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * prob;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// The 10%, 20%, ..., 100% sample quantiles of `values`.
pub fn deciles(values: &[f64]) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::InvalidData("cannot compute deciles of an empty sample".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok((1..=N_KNOTS)
        .map(|k| quantile_sorted(&sorted, k as f64 / N_KNOTS as f64))
        .collect())
}

/// Deciles of state component `dim`, pooled over all individuals and
/// decision points.
pub fn compute_deciles(d: &Dataset, dim: usize) -> Result<Vec<f64>> {
    if dim >= d.state_dim {
        return Err(Error::DimensionMismatch {
            expected: d.state_dim,
            got: dim + 1,
        });
    }
    let values: Vec<f64> = d.states().map(|s| s[dim]).collect();
    deciles(&values)
}

/// Number of hinge atoms and candidate basis functions before pruning.
pub fn candidate_count(state_dim: usize) -> (usize, usize) {
    let atoms = 2 * N_KNOTS * state_dim;
    (atoms, atoms + atoms * (atoms - 1) / 2)
}

struct Column {
    basis: BasisFunction,
    values: Vec<f64>,
}

fn column_key(values: &[f64]) -> u64 {
    let mut h = std::collections::hash_map::DefaultHasher::new();
    for v in values {
        // +0.0 and -0.0 compare equal
        (if *v == 0.0 { 0u64 } else { v.to_bits() }).hash(&mut h);
    }
    h.finish()
}

/// Builds the pruned, de-duplicated, centered hinge basis on the decision
/// point states of `d`.
pub fn build_feature_map(d: &Dataset, prune_threshold: f64) -> Result<FeatureMap> {
    if !(0.0..=1.0).contains(&prune_threshold) {
        return Err(Error::Config(format!("prune threshold {prune_threshold} outside [0, 1]")));
    }
    let states: Vec<&[f64]> = d.states().collect();
    if states.is_empty() {
        return Err(Error::InvalidData("cannot build features from an empty dataset".into()));
    }
    let knots = (0..d.state_dim)
        .map(|j| compute_deciles(d, j))
        .collect::<Result<Vec<_>>>()?;
    let grid = KnotGrid { knots };

    let n = states.len();
    let n_atoms = 2 * N_KNOTS * d.state_dim;
    let atoms: Vec<Hinge> = (0..n_atoms).map(|i| Hinge::from_atom_index(i, N_KNOTS)).collect();
    let atom_values: Vec<Vec<f64>> = atoms
        .iter()
        .map(|h| states.iter().map(|s| h.eval(&grid, s)).collect())
        .collect();

    let max_zero = (prune_threshold * n as f64).floor() as usize;
    let keep = |values: &[f64]| values.iter().filter(|v| **v == 0.0).count() <= max_zero;

    let mut retained: Vec<Column> = Vec::new();
    let mut seen: HashMap<u64, Vec<usize>> = HashMap::new();
    let mut push = |basis: BasisFunction, values: Vec<f64>, retained: &mut Vec<Column>| {
        let key = column_key(&values);
        let bucket = seen.entry(key).or_default();
        if bucket.iter().any(|&i| retained[i].values == values) {
            return;
        }
        bucket.push(retained.len());
        retained.push(Column { basis, values });
    };

    for (a, vals) in atoms.iter().zip(&atom_values) {
        if keep(vals) {
            push(BasisFunction::Singleton(*a), vals.clone(), &mut retained);
        }
    }
    let mut prod = vec![0.0; n];
    for i in 0..n_atoms {
        for j in (i + 1)..n_atoms {
            for (p, (x, y)) in prod.iter_mut().zip(atom_values[i].iter().zip(&atom_values[j])) {
                *p = x * y;
            }
            if keep(&prod) {
                push(BasisFunction::Product(atoms[i], atoms[j]), prod.clone(), &mut retained);
            }
        }
    }

    let centering_means = retained
        .iter()
        .map(|c| c.values.iter().sum::<f64>() / n as f64)
        .collect();
    Ok(FeatureMap {
        knot_grid: grid,
        basis: retained.into_iter().map(|c| c.basis).collect(),
        centering_means,
    })
}

impl FeatureMap {
    /// A map over a caller-chosen basis, centered on the states of `d`.
    pub fn with_basis(knot_grid: KnotGrid, basis: Vec<BasisFunction>, d: &Dataset) -> Result<FeatureMap> {
        if knot_grid.dim() != d.state_dim {
            return Err(Error::DimensionMismatch {
                expected: d.state_dim,
                got: knot_grid.dim(),
            });
        }
        let mut fm = FeatureMap {
            knot_grid,
            centering_means: vec![0.0; basis.len()],
            basis,
        };
        let n = d.n_decision_points() as f64;
        let mut sums = vec![0.0; fm.dim()];
        for s in d.states() {
            for (acc, b) in sums.iter_mut().zip(&fm.basis) {
                *acc += b.eval(&fm.knot_grid, s);
            }
        }
        fm.centering_means = sums.into_iter().map(|x| x / n).collect();
        Ok(fm)
    }

    /// Number of retained basis functions, `p`.
    pub fn dim(&self) -> usize {
        self.basis.len()
    }

    pub fn state_dim(&self) -> usize {
        self.knot_grid.dim()
    }

    fn check_state(&self, state: &[f64]) -> Result<()> {
        if state.len() != self.state_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.state_dim(),
                got: state.len(),
            });
        }
        Ok(())
    }

    /// Uncentered basis values.
    pub fn raw(&self, state: &[f64]) -> Result<Vec<f64>> {
        self.check_state(state)?;
        Ok(self.basis.iter().map(|b| b.eval(&self.knot_grid, state)).collect())
    }

    /// Centered feature vector `f(s)`.
    pub fn evaluate(&self, state: &[f64]) -> Result<Vec<f64>> {
        let mut f = self.raw(state)?;
        for (x, m) in f.iter_mut().zip(&self.centering_means) {
            *x -= m;
        }
        Ok(f)
    }

    /// Centered features of many states, one row per state.
    pub fn evaluate_rows<'a>(&self, states: impl IntoIterator<Item = &'a [f64]>) -> Result<DMatrix<f64>> {
        let states: Vec<&[f64]> = states.into_iter().collect();
        let p = self.dim();
        let mut out = DMatrix::zeros(states.len(), p);
        let n_atoms = 2 * self.knot_grid.knots.iter().map(Vec::len).max().unwrap_or(0) * self.state_dim();
        let n_knots = self.knot_grid.knots.first().map_or(0, Vec::len);
        let mut atoms = vec![0.0; n_atoms];
        for (r, s) in states.iter().enumerate() {
            self.check_state(s)?;
            for (idx, a) in atoms.iter_mut().enumerate() {
                *a = Hinge::from_atom_index(idx, n_knots).eval(&self.knot_grid, s);
            }
            for (c, b) in self.basis.iter().enumerate() {
                let v = match b {
                    BasisFunction::Singleton(h) => atoms[h.atom_index(n_knots)],
                    BasisFunction::Product(x, y) => atoms[x.atom_index(n_knots)] * atoms[y.atom_index(n_knots)],
                };
                out[(r, c)] = v - self.centering_means[c];
            }
        }
        Ok(out)
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&FeatureMapJson::from(self)).map_err(|e| Error::Numerical(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<FeatureMap> {
        let raw: FeatureMapJson = serde_json::from_str(s).map_err(|e| Error::parse(None, None, e.to_string()))?;
        raw.try_into()
    }
}

/// Serialized form: knots, retained basis as atom indices, centering means.
/// Atom `i` is component `i / 20`, knot `(i / 2) % 10`, orientation `+` for
/// even `i`.
#[derive(Serialize, Deserialize)]
struct FeatureMapJson {
    knots: Vec<Vec<f64>>,
    basis: Vec<Vec<usize>>,
    centering_means: Vec<f64>,
}

impl From<&FeatureMap> for FeatureMapJson {
    fn from(fm: &FeatureMap) -> Self {
        let k = fm.knot_grid.knots.first().map_or(N_KNOTS, Vec::len);
        FeatureMapJson {
            knots: fm.knot_grid.knots.clone(),
            basis: fm
                .basis
                .iter()
                .map(|b| match b {
                    BasisFunction::Singleton(h) => vec![h.atom_index(k)],
                    BasisFunction::Product(x, y) => vec![x.atom_index(k), y.atom_index(k)],
                })
                .collect(),
            centering_means: fm.centering_means.clone(),
        }
    }
}

impl TryFrom<FeatureMapJson> for FeatureMap {
    type Error = Error;

    fn try_from(raw: FeatureMapJson) -> Result<FeatureMap> {
        let k = raw.knots.first().map_or(N_KNOTS, Vec::len);
        let n_atoms = 2 * k * raw.knots.len();
        if raw.knots.iter().any(|kn| kn.len() != k) {
            return Err(Error::parse(None, None, "knot lists must have equal length"));
        }
        if raw.basis.len() != raw.centering_means.len() {
            return Err(Error::parse(None, None, "basis and centering_means lengths differ"));
        }
        let basis = raw
            .basis
            .iter()
            .map(|idx| match idx.as_slice() {
                [a] if *a < n_atoms => Ok(BasisFunction::Singleton(Hinge::from_atom_index(*a, k))),
                [a, b] if *a < n_atoms && *b < n_atoms => Ok(BasisFunction::Product(
                    Hinge::from_atom_index(*a, k),
                    Hinge::from_atom_index(*b, k),
                )),
                _ => Err(Error::parse(None, None, format!("invalid basis entry {idx:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(FeatureMap {
            knot_grid: KnotGrid { knots: raw.knots },
            basis,
            centering_means: raw.centering_means,
        })
    }
}
