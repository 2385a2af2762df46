//! Label co-occurrence statistics and the disease-prototype GCN.

use rand::Rng;

use crate::diffmath::{Tape, Tensor, Var};
use crate::encoders::init_uniform;
use crate::error::{Error, Result};

/// Negative slope between the two GCN layers.
pub const GCN_SLOPE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq)]
pub struct Cooccurrence {
    pub counts: Vec<usize>,
    /// Symmetric; the diagonal equals `counts`.
    pub pairs: Vec<Vec<usize>>,
}

pub fn count_cooccurrence<L: AsRef<[u8]>>(labels: &[L]) -> Result<Cooccurrence> {
    let Some(first) = labels.first() else {
        return Err(Error::EmptyDataset("co-occurrence statistics need training labels"));
    };
    let n = first.as_ref().len();
    let mut counts = vec![0; n];
    let mut pairs = vec![vec![0; n]; n];
    for (row, y) in labels.iter().enumerate() {
        let y = y.as_ref();
        if y.len() != n || y.iter().any(|&v| v > 1) {
            return Err(Error::InvalidArgument(format!(
                "label vector {row} is not a length-{n} multi-hot vector"
            )));
        }
        let on: Vec<usize> = (0..n).filter(|&i| y[i] == 1).collect();
        for &i in &on {
            counts[i] += 1;
            for &j in &on {
                pairs[i][j] += 1;
            }
        }
    }
    Ok(Cooccurrence { counts, pairs })
}

/// `A[i][j] = P(label j | label i)` for `i != j`; the diagonal and rows of
/// never-seen labels are zero.
pub fn conditional_matrix(stats: &Cooccurrence) -> Tensor {
    let n = stats.counts.len();
    let mut a = Tensor::zeros(vec![n, n]);
    for i in 0..n {
        if stats.counts[i] == 0 {
            log::warn!("label {i} never occurs in the training split; its correlation row is zero");
            continue;
        }
        for j in (0..n).filter(|&j| j != i) {
            a.data_mut()[i * n + j] = stats.pairs[i][j] as f64 / stats.counts[i] as f64;
        }
    }
    a
}

/// Entrywise `A >= tau`.
pub fn binarize(a: &Tensor, tau: f64) -> Tensor {
    let data = a.data().iter().map(|&v| if v >= tau { 1.0 } else { 0.0 }).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

/// `D^{-1/2} (max(B, Bᵀ) + I) D^{-1/2}` with `D` the row degrees of the
/// symmetrized, self-looped matrix.
pub fn normalize_adjacency(a_bin: &Tensor) -> Result<Tensor> {
    let n = a_bin.rows();
    if a_bin.shape() != [n, n] {
        return Err(Error::Shape {
            op: "normalize_adjacency",
            left: a_bin.shape().to_vec(),
            right: vec![n, n],
        });
    }
    let mut s = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] = if i == j {
                1.0
            } else {
                a_bin.at(i, j).max(a_bin.at(j, i)).min(1.0)
            };
        }
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / s[i * n..(i + 1) * n].iter().sum::<f64>().sqrt())
        .collect();
    for i in 0..n {
        for j in 0..n {
            s[i * n + j] *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    Tensor::matrix(n, n, s)
}

/// Training-split label statistics and the derived adjacency matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct DiseaseCorrelation {
    pub stats: Cooccurrence,
    pub tau: f64,
    pub conditional: Tensor,
    pub binary: Tensor,
    pub normalized: Tensor,
}

impl DiseaseCorrelation {
    pub fn from_labels<L: AsRef<[u8]>>(labels: &[L], tau: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::InvalidArgument(format!("tau must lie in [0, 1], got {tau}")));
        }
        let stats = count_cooccurrence(labels)?;
        let conditional = conditional_matrix(&stats);
        let binary = binarize(&conditional, tau);
        let normalized = normalize_adjacency(&binary)?;
        Ok(Self {
            stats,
            tau,
            conditional,
            binary,
            normalized,
        })
    }

    pub fn n_labels(&self) -> usize {
        self.stats.counts.len()
    }

    /// Long-format CSV: `matrix,row,col,value` for `A`, `A_bin` and `A_hat`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("matrix,row,col,value\n");
        for (name, m) in [
            ("A", &self.conditional),
            ("A_bin", &self.binary),
            ("A_hat", &self.normalized),
        ] {
            let n = m.rows();
            for i in 0..n {
                for j in 0..n {
                    out.push_str(&format!("{name},{i},{j},{}\n", m.at(i, j)));
                }
            }
        }
        out
    }
}

/// Two-layer GCN weights: `N × d_h` then `d_h × d`.
#[derive(Clone, Debug, PartialEq)]
pub struct Gcn<T> {
    pub w1: T,
    pub w2: T,
}

impl Gcn<Tensor> {
    /// Hidden width is `2N`.
    pub fn init(rng: &mut impl Rng, n_labels: usize, dim: usize) -> Self {
        let hidden = 2 * n_labels;
        Self {
            w1: init_uniform(rng, n_labels, vec![n_labels, hidden]),
            w2: init_uniform(rng, hidden, vec![hidden, dim]),
        }
    }
}

impl<T> Gcn<T> {
    pub fn map<'a, U>(&'a self, mut f: impl FnMut(&str, &'a T) -> U) -> Gcn<U> {
        Gcn {
            w1: f("w1", &self.w1),
            w2: f("w2", &self.w2),
        }
    }
}

/// `Â · LeakyReLU(Â · Z · W1) · W2`
pub fn gcn_forward(tape: &mut Tape, a_hat: Var, z: Var, gcn: &Gcn<Var>) -> Result<Var> {
    let h = tape.matmul(z, gcn.w1)?;
    let h = tape.matmul(a_hat, h)?;
    let h = tape.leaky_relu(h, GCN_SLOPE)?;
    let h = tape.matmul(h, gcn.w2)?;
    tape.matmul(a_hat, h)
}
