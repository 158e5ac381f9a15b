//! Average pooling + three LeakyReLU layers + a linear score.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::nn::{bind, join_name, Linear, MapFn, ParamTree, VisitMutFn};
use crate::sslcore::FeatureSequence;

pub const LEAKY_SLOPE: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct Backend<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
    pub fc3: Linear<T>,
    pub out: Linear<T>,
}

pub type BackendParams = Backend<Mat>;

impl<T> ParamTree<T> for Backend<T> {
    type Mapped<U> = Backend<U>;
    fn map<U>(&self, p: &str, f: &mut MapFn<'_, T, U>) -> Backend<U> {
        Backend {
            fc1: self.fc1.map(&join_name(p, "fc1"), f),
            fc2: self.fc2.map(&join_name(p, "fc2"), f),
            fc3: self.fc3.map(&join_name(p, "fc3"), f),
            out: self.out.map(&join_name(p, "out"), f),
        }
    }
    fn visit_mut(&mut self, p: &str, f: &mut VisitMutFn<'_, T>) {
        self.fc1.visit_mut(&join_name(p, "fc1"), f);
        self.fc2.visit_mut(&join_name(p, "fc2"), f);
        self.fc3.visit_mut(&join_name(p, "fc3"), f);
        self.out.visit_mut(&join_name(p, "out"), f);
    }
}

impl Backend<Mat> {
    pub fn init(dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sd = (2.0 / dim as f64).sqrt();
        Backend {
            fc1: Linear::init(&mut rng, dim, dim, sd),
            fc2: Linear::init(&mut rng, dim, dim, sd),
            fc3: Linear::init(&mut rng, dim, dim, sd),
            out: Linear::init(&mut rng, dim, 1, (1.0 / dim as f64).sqrt()),
        }
    }

    pub fn dim(&self) -> usize {
        self.fc1.w.nrows()
    }
}

impl Backend<Var> {
    /// `1 x 1` logit for an `N x D` feature matrix.
    pub fn forward(&self, g: &mut Graph, feats: Var) -> Var {
        let mut h = g.mean_rows(feats);
        for l in [&self.fc1, &self.fc2, &self.fc3] {
            let y = l.forward(g, h);
            h = g.leaky_relu(y, LEAKY_SLOPE);
        }
        self.out.forward(g, h)
    }
}

/// Raw logit, higher means more likely bona fide.
pub fn backend_score(backend: &BackendParams, feats: &FeatureSequence) -> Result<f64> {
    let (n, d) = feats.shape();
    if d != backend.dim() || n == 0 {
        return Err(Error::input(format!(
            "back end expects N x {} features with N >= 1, got {n} x {d}",
            backend.dim()
        )));
    }
    let mut g = Graph::new();
    let vars = bind(&mut g, backend);
    let x = g.leaf(feats.values.clone());
    let s = vars.forward(&mut g, x);
    Ok(g.scalar(s))
}
