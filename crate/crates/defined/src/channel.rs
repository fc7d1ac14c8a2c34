//! Synthetic block-fading channel simulation.
//!
//! A *frame* is `T` slots sharing a single channel draw: the matrix `H`
//! (entries CN(0,1)) and noise variance `sigma2` stay fixed while `T`
//! uniform symbol vectors are transmitted through `y = H x + z`,
//! `z ~ CN(0, sigma2 I)`. Transmit vectors are scaled by `1/sqrt(n_t)` so
//! the expected total transmit power is 1 regardless of antenna count.
//!
//! Randomness is counter-based: frame `i` of a configuration is produced by
//! a dedicated ChaCha12 stream derived from `(seed, i)`, so any frame can
//! be regenerated independently and datasets are identical no matter how
//! work is split across threads or processes.

use crate::constellation::{Constellation, Scheme};
use num_complex::Complex64;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

/// Simulation settings shared by training and evaluation data streams.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub scheme: Scheme,
    pub n_r: usize,
    pub n_t: usize,
    /// Slots per frame (coherence block length).
    #[serde(rename = "T", default = "default_t")]
    pub t: usize,
    pub snr_db_min: f64,
    pub snr_db_max: f64,
    /// How the per-frame noise level is drawn from the SNR range.
    #[serde(default)]
    pub snr_sampling: SnrSampling,
    pub seed: u64,
}

fn default_t() -> usize {
    31
}

/// Per-frame SNR draw rule. `Db` draws the SNR uniformly in dB (default);
/// `Variance` draws the noise variance uniformly between the endpoints
/// implied by the dB range.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SnrSampling {
    #[default]
    Db,
    Variance,
}

impl SimConfig {
    /// Basic structural validation; field-path messages are produced by the
    /// experiment-config layer, this guards direct library use.
    pub fn validate(&self) -> Result<(), String> {
        if self.n_r == 0 || self.n_t == 0 {
            return Err("n_r and n_t must be positive".into());
        }
        if self.t < 2 {
            return Err("T must be at least 2".into());
        }
        if !(self.snr_db_min <= self.snr_db_max) {
            return Err("snr_db_min must not exceed snr_db_max".into());
        }
        Ok(())
    }
}

/// One channel realization: `h` is `n_r x n_t` row-major.
#[derive(Clone, Debug)]
pub struct ChannelTask {
    pub h: Vec<Complex64>,
    pub sigma2: f64,
    pub n_r: usize,
    pub n_t: usize,
}

impl ChannelTask {
    pub fn h_at(&self, r: usize, c: usize) -> Complex64 {
        self.h[r * self.n_t + c]
    }
}

/// One simulated frame: `T` transmitted index vectors and the matching
/// received vectors under a single [`ChannelTask`].
#[derive(Clone, Debug)]
pub struct PromptFrame {
    pub task: ChannelTask,
    /// Symbol indices, `T x n_t` row-major.
    pub x_indices: Vec<usize>,
    /// Received vectors, `T x n_r` row-major.
    pub y: Vec<Complex64>,
    pub t_len: usize,
}

impl PromptFrame {
    pub fn x_at(&self, t: usize) -> &[usize] {
        let n = self.task.n_t;
        &self.x_indices[t * n..(t + 1) * n]
    }

    pub fn y_at(&self, t: usize) -> &[Complex64] {
        let n = self.task.n_r;
        &self.y[t * n..(t + 1) * n]
    }

    /// The transmitted (power-normalized) vector at slot `t`.
    pub fn tx_at(&self, t: usize, cons: &Constellation) -> Vec<Complex64> {
        let scale = 1.0 / (self.task.n_t as f64).sqrt();
        self.x_at(t).iter().map(|&i| cons.point(i) * scale).collect()
    }

    /// Stable 64-bit content hash (FNV-1a over symbol indices and the raw
    /// bits of received samples). Used to assert that detector arms are
    /// evaluated on identical frames.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut eat = |v: u64| {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
        };
        for &i in &self.x_indices {
            eat(i as u64);
        }
        for z in &self.y {
            eat(z.re.to_bits());
            eat(z.im.to_bits());
        }
        eat(self.task.sigma2.to_bits());
        h
    }
}

/// Converts an SNR in dB to the complex noise variance `sigma2 = 10^(-snr/10)`.
pub fn snr_db_to_sigma2(snr_db: f64) -> f64 {
    10f64.powf(-snr_db / 10.0)
}

/// The RNG for frame `index` of the stream identified by `seed`.
///
/// Same `(seed, index)` always yields the same generator; distinct indices
/// yield statistically independent streams.
pub fn frame_rng(seed: u64, index: u64) -> ChaCha12Rng {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Draws one channel realization: i.i.d. CN(0,1) entries for `H`
/// (real and imaginary parts each N(0, 1/2)) and a noise variance from the
/// configured SNR range.
pub fn sample_task(cfg: &SimConfig, rng: &mut ChaCha12Rng) -> ChannelTask {
    let n = cfg.n_r * cfg.n_t;
    let mut h = Vec::with_capacity(n);
    for _ in 0..n {
        h.push(complex_normal(rng, std::f64::consts::FRAC_1_SQRT_2));
    }
    let sigma2 = match cfg.snr_sampling {
        SnrSampling::Db => {
            let snr_db = rng.gen_range(cfg.snr_db_min..=cfg.snr_db_max);
            snr_db_to_sigma2(snr_db)
        }
        SnrSampling::Variance => {
            let lo = snr_db_to_sigma2(cfg.snr_db_max);
            let hi = snr_db_to_sigma2(cfg.snr_db_min);
            rng.gen_range(lo..=hi)
        }
    };
    ChannelTask {
        h,
        sigma2,
        n_r: cfg.n_r,
        n_t: cfg.n_t,
    }
}

/// Simulates `t_len` slots through `task`: uniform symbol indices per
/// antenna, then `y_t = H x_t + z_t` with the transmit vector scaled by
/// `1/sqrt(n_t)`.
pub fn generate_frame(
    task: &ChannelTask,
    cons: &Constellation,
    t_len: usize,
    rng: &mut ChaCha12Rng,
) -> PromptFrame {
    let c = cons.class_count();
    let tx_scale = 1.0 / (task.n_t as f64).sqrt();
    let noise_std = (task.sigma2 / 2.0).sqrt();
    let mut x_indices = Vec::with_capacity(t_len * task.n_t);
    let mut y = Vec::with_capacity(t_len * task.n_r);
    let mut tx = vec![Complex64::new(0.0, 0.0); task.n_t];
    for _ in 0..t_len {
        for j in 0..task.n_t {
            let idx = rng.gen_range(0..c);
            x_indices.push(idx);
            tx[j] = cons.point(idx) * tx_scale;
        }
        for r in 0..task.n_r {
            let mut acc = Complex64::new(0.0, 0.0);
            for (j, &x) in tx.iter().enumerate() {
                acc += task.h[r * task.n_t + j] * x;
            }
            acc += complex_normal(rng, noise_std);
            y.push(acc);
        }
    }
    PromptFrame {
        task: task.clone(),
        x_indices,
        y,
        t_len,
    }
}

/// Frame `index` of the stream defined by `cfg.seed`: task draw followed by
/// slot simulation on a dedicated RNG stream.
pub fn nth_frame(cfg: &SimConfig, cons: &Constellation, index: u64) -> PromptFrame {
    let mut rng = frame_rng(cfg.seed, index);
    let task = sample_task(cfg, &mut rng);
    generate_frame(&task, cons, cfg.t, &mut rng)
}

fn complex_normal(rng: &mut ChaCha12Rng, component_std: f64) -> Complex64 {
    let re: f64 = rng.sample(StandardNormal);
    let im: f64 = rng.sample(StandardNormal);
    Complex64::new(re * component_std, im * component_std)
}
