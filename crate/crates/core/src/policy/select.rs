use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::minilang::TokenId;
use crate::scalar::{sigmoid, Scalar};

/// Straight-through gate: the forward value is `hard`, the backward sensitivity
/// is `σ'(w_φ)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WGate<S> {
    pub hard: bool,
    pub relaxed: S,
    pub raw: S,
}

impl<S: Scalar> WGate<S> {
    pub fn value(&self) -> S {
        if self.hard {
            S::one()
        } else {
            S::zero()
        }
    }

    /// `dσ/dw_φ`, the gradient routed through the hard gate.
    pub fn sensitivity(&self) -> S {
        self.relaxed * (S::one() - self.relaxed)
    }
}

/// Fires when `σ(w_φ)` strictly exceeds `threshold`.
pub fn gate_decision<S: Scalar>(w_phi: S, threshold: f64) -> WGate<S> {
    let relaxed = sigmoid(w_phi);
    WGate { hard: relaxed > S::of(threshold), relaxed, raw: w_phi }
}

/// Where the Gumbel perturbation comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
pub enum NoiseMode {
    /// Uniform draws seeded from a hash of the secret key and the context window,
    /// so a detector holding the key can replay them.
    Keyed { key: u64 },
    /// No perturbation: selection is plain top-k of `l_φ`.
    Noiseless,
}

/// Seed for the noise at one position: leading 8 bytes of
/// `sha256(key ‖ window ids)`, both little endian.
pub fn noise_seed(key: u64, window: &[TokenId]) -> u64 {
    let mut h = Sha256::new();
    h.update(key.to_le_bytes());
    for t in window {
        h.update(t.0.to_le_bytes());
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

/// A uniform draw strictly inside (0, 1).
fn open_unit<R: RngCore>(rng: &mut R) -> f64 {
    ((rng.next_u64() >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

pub fn uniform_noise_from_seed(seed: u64, n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| open_unit(&mut rng)).collect()
}

pub fn uniform_noise<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| open_unit(rng)).collect()
}

/// Noise that makes every Gumbel perturbation exactly zero.
pub fn noiseless(n: usize) -> Vec<f64> {
    vec![(-1.0f64).exp(); n]
}

impl NoiseMode {
    /// The uniform draws for a window, plus the seed they came from.
    pub fn draw(&self, window: &[TokenId], n: usize) -> (Vec<f64>, Option<u64>) {
        match *self {
            NoiseMode::Keyed { key } => {
                let seed = noise_seed(key, window);
                (uniform_noise_from_seed(seed, n), Some(seed))
            }
            NoiseMode::Noiseless => (noiseless(n), None),
        }
    }
}

/// `k = ⌊γ·|V|⌋`.
pub fn green_count(vocab_size: usize, gamma: f64) -> usize {
    (gamma * vocab_size as f64).floor() as usize
}

/// Result of a Gumbel top-k draw.
#[derive(Clone, Debug, PartialEq)]
pub struct GreenSelection<S> {
    pub k: usize,
    /// Hard membership indicator, one entry per token.
    pub green: Vec<bool>,
    /// Perturbed logits `l_φ + Gumbel(u)`.
    pub g: Vec<S>,
    /// Midpoint between the k-th and (k+1)-th largest `g`.
    pub threshold: S,
    pub u: Vec<f64>,
}

impl<S: Scalar> GreenSelection<S> {
    pub fn contains(&self, t: TokenId) -> bool {
        self.green[t.index()]
    }

    pub fn members(&self) -> Vec<TokenId> {
        (0..self.green.len()).filter(|&i| self.green[i]).map(|i| TokenId(i as u16)).collect()
    }

    /// Hard indicator as scalars.
    pub fn indicator(&self) -> Vec<S> {
        self.green.iter().map(|&g| if g { S::one() } else { S::zero() }).collect()
    }
}

/// Adds Gumbel noise `−ln(−ln u)` to `l_φ` and keeps the `⌊γ|V|⌋` largest,
/// breaking ties toward the lower token id.
pub fn gumbel_green_selection<S: Scalar>(l_phi: &[S], gamma: f64, u: &[f64]) -> GreenSelection<S> {
    assert!(gamma > 0.0 && gamma < 1.0, "gamma must lie in (0, 1)");
    assert_eq!(l_phi.len(), u.len());
    let n = l_phi.len();
    let k = green_count(n, gamma);
    let g: Vec<S> = l_phi.iter().zip(u).map(|(&l, &u)| l + S::of(-(-u.ln()).ln())).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| g[b].partial_cmp(&g[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut green = vec![false; n];
    for &i in &order[..k] {
        green[i] = true;
    }
    let threshold = match k {
        0 => g[order[0]] + S::one(),
        k if k == n => g[order[n - 1]] - S::one(),
        k => (g[order[k - 1]] + g[order[k]]) * S::of(0.5),
    };
    GreenSelection { k, green, g, threshold, u: u.to_vec() }
}

/// Relaxed membership `S(g)_v = σ((g_v − θ_k)/τ)` with `θ_k` held constant.
/// Returns the values and their derivatives with respect to `g_v` (equivalently
/// `l_φ,v`, since the noise is additive).
pub fn membership_relaxation<S: Scalar>(g: &[S], threshold: S, relax_temperature: f64) -> (Vec<S>, Vec<S>) {
    assert!(relax_temperature > 0.0, "relaxation temperature must be positive");
    let tau = S::of(relax_temperature);
    g.iter()
        .map(|&gv| {
            let s = sigmoid((gv - threshold) / tau);
            (s, s * (S::one() - s) / tau)
        })
        .unzip()
}
