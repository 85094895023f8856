use ndarray::{Array1, Array2, Zip};

use crate::error::{Error, Result};
use crate::math::{gaussian_matrix, seeded_rng};

pub const INIT_STD: f64 = 0.02;

/// Learnable parameters of one domain group's class-generalization network:
/// multi-head cross-attention from a learned query onto class tokens,
/// followed by a two-layer ReLU head that emits prompt tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptNetParams {
    /// `[prompt_len × hidden]`
    pub query: Array2<f64>,
    /// `[token_dim × hidden]`
    pub w_k: Array2<f64>,
    /// `[token_dim × hidden]`
    pub w_v: Array2<f64>,
    /// `[hidden × hidden]`
    pub w_o: Array2<f64>,
    pub head_count: usize,
    /// `[hidden × hidden]`
    pub mlp_w1: Array2<f64>,
    pub mlp_b1: Array1<f64>,
    /// `[hidden × token_dim]`
    pub mlp_w2: Array2<f64>,
    pub mlp_b2: Array1<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetShape {
    pub prompt_len: usize,
    pub hidden: usize,
    pub heads: usize,
    pub token_dim: usize,
}

/// Applies `$body` to each matrix and vector field pair of two parameter sets.
macro_rules! for_each_field {
    ($a:expr, $b:expr, |$x:ident, $y:ident| $body:expr) => {{
        {
            let ($x, $y) = (&mut $a.query, &$b.query);
            $body;
        }
        {
            let ($x, $y) = (&mut $a.w_k, &$b.w_k);
            $body;
        }
        {
            let ($x, $y) = (&mut $a.w_v, &$b.w_v);
            $body;
        }
        {
            let ($x, $y) = (&mut $a.w_o, &$b.w_o);
            $body;
        }
        {
            let ($x, $y) = (&mut $a.mlp_w1, &$b.mlp_w1);
            $body;
        }
        {
            let ($x, $y) = (&mut $a.mlp_b1, &$b.mlp_b1);
            $body;
        }
        {
            let ($x, $y) = (&mut $a.mlp_w2, &$b.mlp_w2);
            $body;
        }
        {
            let ($x, $y) = (&mut $a.mlp_b2, &$b.mlp_b2);
            $body;
        }
    }};
}

impl PromptNetParams {
    /// Seeded Gaussian init (std 0.02), zero biases.
    pub fn init(shape: NetShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = seeded_rng(seed, &[0x9e7]);
        let NetShape {
            prompt_len,
            hidden,
            heads,
            token_dim,
        } = shape;
        Ok(Self {
            query: gaussian_matrix(prompt_len, hidden, INIT_STD, &mut rng),
            w_k: gaussian_matrix(token_dim, hidden, INIT_STD, &mut rng),
            w_v: gaussian_matrix(token_dim, hidden, INIT_STD, &mut rng),
            w_o: gaussian_matrix(hidden, hidden, INIT_STD, &mut rng),
            head_count: heads,
            mlp_w1: gaussian_matrix(hidden, hidden, INIT_STD, &mut rng),
            mlp_b1: Array1::zeros(hidden),
            mlp_w2: gaussian_matrix(hidden, token_dim, INIT_STD, &mut rng),
            mlp_b2: Array1::zeros(token_dim),
        })
    }

    pub fn zeros(shape: NetShape) -> Result<Self> {
        shape.validate()?;
        let NetShape {
            prompt_len,
            hidden,
            heads,
            token_dim,
        } = shape;
        Ok(Self {
            query: Array2::zeros((prompt_len, hidden)),
            w_k: Array2::zeros((token_dim, hidden)),
            w_v: Array2::zeros((token_dim, hidden)),
            w_o: Array2::zeros((hidden, hidden)),
            head_count: heads,
            mlp_w1: Array2::zeros((hidden, hidden)),
            mlp_b1: Array1::zeros(hidden),
            mlp_w2: Array2::zeros((hidden, token_dim)),
            mlp_b2: Array1::zeros(token_dim),
        })
    }

    pub fn shape(&self) -> NetShape {
        NetShape {
            prompt_len: self.query.nrows(),
            hidden: self.query.ncols(),
            heads: self.head_count,
            token_dim: self.mlp_w2.ncols(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape()).expect("shape of an existing network is valid")
    }

    /// Checks internal shape consistency and finiteness.
    pub fn validate(&self) -> Result<()> {
        let s = self.shape();
        s.validate()?;
        let expect = |name: &str, got: (usize, usize), want: (usize, usize)| {
            if got != want {
                Err(Error::Shape(format!("{name} is {got:?}, expected {want:?}")))
            } else {
                Ok(())
            }
        };
        expect("w_k", self.w_k.dim(), (s.token_dim, s.hidden))?;
        expect("w_v", self.w_v.dim(), (s.token_dim, s.hidden))?;
        expect("w_o", self.w_o.dim(), (s.hidden, s.hidden))?;
        expect("mlp_w1", self.mlp_w1.dim(), (s.hidden, s.hidden))?;
        expect("mlp_b1", (self.mlp_b1.len(), 1), (s.hidden, 1))?;
        expect("mlp_w2", self.mlp_w2.dim(), (s.hidden, s.token_dim))?;
        expect("mlp_b2", (self.mlp_b2.len(), 1), (s.token_dim, 1))?;
        if self.values().any(|v| !v.is_finite()) {
            return Err(Error::Data("prompt network has non-finite parameters".into()));
        }
        Ok(())
    }

    /// All parameter values in a fixed field order.
    pub fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.query
            .iter()
            .chain(self.w_k.iter())
            .chain(self.w_v.iter())
            .chain(self.w_o.iter())
            .chain(self.mlp_w1.iter())
            .chain(self.mlp_b1.iter())
            .chain(self.mlp_w2.iter())
            .chain(self.mlp_b2.iter())
            .copied()
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut f64> + '_ {
        self.query
            .iter_mut()
            .chain(self.w_k.iter_mut())
            .chain(self.w_v.iter_mut())
            .chain(self.w_o.iter_mut())
            .chain(self.mlp_w1.iter_mut())
            .chain(self.mlp_b1.iter_mut())
            .chain(self.mlp_w2.iter_mut())
            .chain(self.mlp_b2.iter_mut())
    }

    pub fn num_values(&self) -> usize {
        self.values().count()
    }

    pub fn check_same_shape(&self, other: &Self) -> Result<()> {
        if self.shape() != other.shape()
            || self.w_k.dim() != other.w_k.dim()
            || self.mlp_w2.dim() != other.mlp_w2.dim()
        {
            return Err(Error::Shape(format!(
                "prompt network shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    /// `self += scale * other`, elementwise.
    pub fn scaled_add(&mut self, scale: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other)?;
        for_each_field!(self, other, |x, y| x.scaled_add(scale, y));
        Ok(())
    }

    /// `self - other`, elementwise.
    pub fn difference(&self, other: &Self) -> Result<Self> {
        let mut out = self.clone();
        out.scaled_add(-1.0, other)?;
        Ok(out)
    }

    pub fn scale(&mut self, factor: f64) {
        for v in self.values_mut() {
            *v *= factor;
        }
    }

    /// Applies `f(value, other_value)` elementwise.
    pub fn zip_apply(&mut self, other: &Self, f: impl Fn(&mut f64, f64)) -> Result<()> {
        self.check_same_shape(other)?;
        for_each_field!(self, other, |x, y| Zip::from(x).and(y).for_each(|a, &b| f(a, b)));
        Ok(())
    }

    /// Bitwise equality of every value (distinguishes -0.0 and NaN payloads).
    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.shape() == other.shape()
            && self
                .values()
                .zip(other.values())
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 || self.hidden == 0 || self.heads == 0 || self.token_dim == 0 {
            return Err(Error::Argument(format!(
                "prompt network dimensions must be positive: {self:?}"
            )));
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Argument(format!(
                "hidden width {} is not divisible by {} heads",
                self.hidden, self.heads
            )));
        }
        Ok(())
    }
}

/// Global prompt plus one prompt per training domain, with the history of
/// aggregated domain prompts consumed by beta momentum averaging.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptBank {
    /// `[global_len × token_dim]`
    pub global_prompt: Array2<f64>,
    /// One `[domain_len × token_dim]` matrix per domain.
    pub domain_prompts: Vec<Array2<f64>>,
    /// Per domain, aggregated prompt snapshots ordered by round; starts with
    /// the initial prompt.
    pub prompt_history: Vec<Vec<Array2<f64>>>,
}

impl PromptBank {
    pub fn init(
        num_domains: usize,
        global_len: usize,
        domain_len: usize,
        token_dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if num_domains == 0 || global_len == 0 || domain_len == 0 || token_dim == 0 {
            return Err(Error::Argument("prompt bank dimensions must be positive".into()));
        }
        let mut rng = seeded_rng(seed, &[0xba4c]);
        let global_prompt = gaussian_matrix(global_len, token_dim, INIT_STD, &mut rng);
        let domain_prompts: Vec<_> = (0..num_domains)
            .map(|_| gaussian_matrix(domain_len, token_dim, INIT_STD, &mut rng))
            .collect();
        let prompt_history = domain_prompts.iter().map(|p| vec![p.clone()]).collect();
        Ok(Self {
            global_prompt,
            domain_prompts,
            prompt_history,
        })
    }

    pub fn num_domains(&self) -> usize {
        self.domain_prompts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_history.len() != self.domain_prompts.len() {
            return Err(Error::Data(format!(
                "{} history lists for {} domain prompts",
                self.prompt_history.len(),
                self.domain_prompts.len()
            )));
        }
        let td = self.global_prompt.ncols();
        for (d, (p, hist)) in self.domain_prompts.iter().zip(&self.prompt_history).enumerate() {
            if p.ncols() != td || hist.iter().any(|h| h.dim() != p.dim()) {
                return Err(Error::Shape(format!("domain {d} prompt shapes are inconsistent")));
            }
        }
        let finite = self.global_prompt.iter().all(|v| v.is_finite())
            && self
                .domain_prompts
                .iter()
                .chain(self.prompt_history.iter().flatten())
                .all(|m| m.iter().all(|v| v.is_finite()));
        if !finite {
            return Err(Error::Data("prompt bank has non-finite values".into()));
        }
        Ok(())
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        fn eq(a: &Array2<f64>, b: &Array2<f64>) -> bool {
            a.dim() == b.dim() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
        }
        eq(&self.global_prompt, &other.global_prompt)
            && self.domain_prompts.len() == other.domain_prompts.len()
            && self
                .domain_prompts
                .iter()
                .zip(&other.domain_prompts)
                .all(|(a, b)| eq(a, b))
            && self.prompt_history.len() == other.prompt_history.len()
            && self
                .prompt_history
                .iter()
                .zip(&other.prompt_history)
                .all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| eq(x, y)))
    }
}
