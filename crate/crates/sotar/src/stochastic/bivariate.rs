//! Gamma marginals and the bivariate Gamma model for the joint law of
//! two adjacent link travel times.
//!
//! The joint density is a double power series around the product of the
//! marginals. Two variants of the series are supported: the form
//! [`JointForm::AsPrinted`] keeps the literal coefficient pattern of the
//! source formula, while [`JointForm::Corrected`] is a Kibble-type
//! variant that provably integrates to one, has the exact requested
//! Gamma marginals, and has product-moment correlation exactly ρ. A
//! numerical normalization gate picks the variant at construction time:
//! the literal form misses total mass 1 by orders of magnitude, so the
//! gate selects the corrected form in practice.
//!
//! Both variants share one canonical series
//!
//! ```text
//! Φ(ã, b̃) = Σ_{k₁,k₂ ≥ 0} ã^{k₁} b̃^{k₁+k₂} (μ)_{k₂} / (k₁! k₂! Γ(ν+k₁+k₂))
//! ```
//!
//! with μ = α_Y − α_W ≥ 0, ν = α_Y, ã = β_W w/(1−η), and b̃ = η_eff β_Y
//! y/(1−η), where η_eff is η for the corrected form and η² for the
//! literal one. The slot variable Y must carry the larger shape; when an
//! upstream/downstream pair violates that, the slots are swapped and the
//! same surface is read transposed.

use std::collections::HashMap;
use std::sync::{Mutex, OnceLock};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma as GammaSampler};

use super::special::{ln_gamma, reg_lower_gamma};
use super::StochasticError;

/// Gamma distribution parameterized by shape and rate (the rate
/// multiplies the variate, so mean = shape/rate).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GammaMarginal {
    shape: f64,
    rate: f64,
}

impl GammaMarginal {
    pub fn new(shape: f64, rate: f64) -> Result<Self, StochasticError> {
        if !(shape.is_finite() && shape > 0.0 && rate.is_finite() && rate > 0.0) {
            return Err(StochasticError::InvalidGamma(shape, rate));
        }
        Ok(Self { shape, rate })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn mean(&self) -> f64 {
        self.shape / self.rate
    }

    pub fn variance(&self) -> f64 {
        self.shape / (self.rate * self.rate)
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        if x < 0.0 {
            return f64::NEG_INFINITY;
        }
        self.shape * self.rate.ln() + ln_pow(x, self.shape - 1.0)
            - self.rate * x
            - ln_gamma(self.shape)
    }

    pub fn pdf(&self, x: f64) -> f64 {
        self.ln_pdf(x).exp()
    }

    /// Distribution function, the regularized lower incomplete gamma
    /// function at βx.
    pub fn cdf(&self, x: f64) -> f64 {
        assert!(x >= 0.0, "cdf argument must be nonnegative, got {x}");
        reg_lower_gamma(self.shape, self.rate * x)
    }
}

/// Inverts (mean, variance) into Gamma shape and rate.
pub fn gamma_from_moments(mean: f64, variance: f64) -> Result<GammaMarginal, StochasticError> {
    if !(mean.is_finite() && mean > 0.0 && variance.is_finite() && variance > 0.0) {
        return Err(StochasticError::InvalidMoments(mean, variance));
    }
    GammaMarginal::new(mean * mean / variance, mean / variance)
}

/// Which series variant a pair evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointForm {
    /// Literal coefficient pattern of the source formula; fails the
    /// normalization gate for every practically relevant parameter set.
    AsPrinted,
    /// Kibble-type variant with exact normalization, exact Gamma
    /// marginals, and exact correlation ρ.
    Corrected,
}

/// Joint law of the travel times on two consecutive links: `upstream`
/// is the link just traversed (the conditioning variable), `downstream`
/// the link ahead.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BivariatePair {
    upstream: GammaMarginal,
    downstream: GammaMarginal,
    correlation: f64,
    eta: f64,
    swapped: bool,
    form: JointForm,
}

/// Everything the series evaluators need for one density point:
/// `ln_prefactor` carries the Jacobian, the Gamma-kernel factors, and
/// the exponential; the series argument pair is (ã, b̃).
pub(crate) struct SeriesPoint {
    pub mu: f64,
    pub nu: f64,
    pub a_tilde: f64,
    pub b_tilde: f64,
    pub ln_prefactor: f64,
}

impl BivariatePair {
    /// Builds a pair and selects the series form through the
    /// normalization gate (memoized per parameter set).
    pub fn new(
        upstream: GammaMarginal,
        downstream: GammaMarginal,
        correlation: f64,
    ) -> Result<Self, StochasticError> {
        Self::build(upstream, downstream, correlation, None)
    }

    /// Builds a pair with an explicitly chosen series form, bypassing
    /// the normalization gate.
    pub fn with_form(
        upstream: GammaMarginal,
        downstream: GammaMarginal,
        correlation: f64,
        form: JointForm,
    ) -> Result<Self, StochasticError> {
        Self::build(upstream, downstream, correlation, Some(form))
    }

    fn build(
        upstream: GammaMarginal,
        downstream: GammaMarginal,
        correlation: f64,
        form: Option<JointForm>,
    ) -> Result<Self, StochasticError> {
        if !(0.0..1.0).contains(&correlation) {
            return Err(StochasticError::InvalidCorrelation(correlation));
        }
        if correlation == 0.0 {
            return Ok(Self {
                upstream,
                downstream,
                correlation,
                eta: 0.0,
                swapped: false,
                form: form.unwrap_or(JointForm::Corrected),
            });
        }
        // The larger shape must sit in the Y slot of the series.
        let swapped = upstream.shape < downstream.shape;
        let (w_slot, y_slot) = if swapped {
            (upstream, downstream)
        } else {
            (downstream, upstream)
        };
        let eta = correlation * (y_slot.shape / w_slot.shape).sqrt();
        if !(0.0..1.0).contains(&eta) {
            return Err(StochasticError::EtaOutOfRange {
                rho: correlation,
                shape_w: w_slot.shape,
                shape_y: y_slot.shape,
                eta,
            });
        }
        let form = match form {
            Some(f) => f,
            None => select_form(w_slot, y_slot, eta),
        };
        Ok(Self {
            upstream,
            downstream,
            correlation,
            eta,
            swapped,
            form,
        })
    }

    pub fn upstream(&self) -> GammaMarginal {
        self.upstream
    }

    pub fn downstream(&self) -> GammaMarginal {
        self.downstream
    }

    pub fn correlation(&self) -> f64 {
        self.correlation
    }

    pub fn eta(&self) -> f64 {
        self.eta
    }

    /// True when the upstream shape is smaller than the downstream
    /// shape, so the slots of the series are exchanged internally.
    pub fn swapped(&self) -> bool {
        self.swapped
    }

    pub fn form(&self) -> JointForm {
        self.form
    }

    fn slot_marginals(&self) -> (GammaMarginal, GammaMarginal) {
        if self.swapped {
            (self.upstream, self.downstream)
        } else {
            (self.downstream, self.upstream)
        }
    }

    /// Series parameters for the density at downstream value `w` and
    /// upstream value `y`. Only valid for ρ > 0.
    pub(crate) fn series_point(&self, w: f64, y: f64) -> SeriesPoint {
        let (w_slot_val, y_slot_val) = if self.swapped { (y, w) } else { (w, y) };
        let (wm, ym) = self.slot_marginals();
        let a = wm.rate * w_slot_val;
        let b = ym.rate * y_slot_val;
        let om = 1.0 - self.eta;
        let eta_eff = match self.form {
            JointForm::Corrected => self.eta,
            JointForm::AsPrinted => self.eta * self.eta,
        };
        let ln_jacobian = match self.form {
            JointForm::Corrected => (wm.rate * ym.rate).ln(),
            JointForm::AsPrinted => 0.0,
        };
        SeriesPoint {
            mu: ym.shape - wm.shape,
            nu: ym.shape,
            a_tilde: a / om,
            b_tilde: eta_eff * b / om,
            ln_prefactor: ln_jacobian + ln_pow(a, wm.shape - 1.0) + ln_pow(b, ym.shape - 1.0)
                - (a + b) / om
                - wm.shape * om.ln()
                - ln_gamma(wm.shape),
        }
    }

    /// Joint density of (downstream = w, upstream = y).
    pub fn joint_pdf(&self, w: f64, y: f64) -> Result<f64, StochasticError> {
        if w < 0.0 || y < 0.0 {
            return Ok(0.0);
        }
        if self.correlation == 0.0 {
            return Ok(self.downstream.pdf(w) * self.upstream.pdf(y));
        }
        let p = self.series_point(w, y);
        if !p.ln_prefactor.is_finite() {
            // A zero power factor annihilates the density regardless of
            // the series value.
            return Ok(if p.ln_prefactor == f64::NEG_INFINITY {
                0.0
            } else {
                f64::INFINITY
            });
        }
        let ln_phi = ln_phi_diagonal(p.mu, p.nu, p.a_tilde * p.b_tilde, p.b_tilde)?;
        Ok((p.ln_prefactor + ln_phi).exp())
    }

    /// Density of the downstream travel time conditioned on the
    /// realized upstream travel time `y`; the joint divided by the
    /// upstream marginal density.
    pub fn conditional_pdf(&self, w: f64, y: f64) -> Result<f64, StochasticError> {
        if self.correlation == 0.0 {
            return Ok(if w < 0.0 { 0.0 } else { self.downstream.pdf(w) });
        }
        let ln_fy = self.upstream.ln_pdf(y);
        if ln_fy < CONDITIONING_LN_FLOOR {
            return Err(StochasticError::ConditioningFloor(y));
        }
        if w < 0.0 {
            return Ok(0.0);
        }
        let p = self.series_point(w, y);
        if p.ln_prefactor == f64::NEG_INFINITY {
            return Ok(0.0);
        }
        let ln_phi = ln_phi_diagonal(p.mu, p.nu, p.a_tilde * p.b_tilde, p.b_tilde)?;
        Ok((p.ln_prefactor + ln_phi - ln_fy).exp())
    }

    /// Draws `n` correlated (y, w) samples by additive shared-component
    /// construction: three independent unit-rate Gammas X₀, X₁, X₂ with
    /// shapes (ηα_W, α_W − ηα_W, α_Y − ηα_W) combine into
    /// W = (X₀+X₁)/β_W and Y = (X₀+X₂)/β_Y. The construction matches
    /// the pair's means, variances, and correlation exactly; it is not
    /// claimed to match the series density beyond second moments.
    pub fn sample_correlated(&self, n: usize, seed: u64) -> Vec<(f64, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        if self.correlation == 0.0 {
            let up = GammaSampler::new(self.upstream.shape, 1.0 / self.upstream.rate)
                .expect("validated shape");
            let down = GammaSampler::new(self.downstream.shape, 1.0 / self.downstream.rate)
                .expect("validated shape");
            return (0..n)
                .map(|_| (up.sample(&mut rng), down.sample(&mut rng)))
                .collect();
        }
        let (wm, ym) = self.slot_marginals();
        let shared_shape = self.eta * wm.shape;
        let shared = GammaSampler::new(shared_shape, 1.0).expect("validated shape");
        let w_rest = GammaSampler::new(wm.shape - shared_shape, 1.0).expect("validated shape");
        let y_rest = GammaSampler::new(ym.shape - shared_shape, 1.0).expect("validated shape");
        (0..n)
            .map(|_| {
                let x0 = shared.sample(&mut rng);
                let w_slot = (x0 + w_rest.sample(&mut rng)) / wm.rate;
                let y_slot = (x0 + y_rest.sample(&mut rng)) / ym.rate;
                if self.swapped {
                    (w_slot, y_slot)
                } else {
                    (y_slot, w_slot)
                }
            })
            .collect()
    }
}

/// Below this log-density of the upstream marginal, conditioning is
/// numerically meaningless and kernel construction falls back to the
/// unconditional downstream marginal.
pub(crate) const CONDITIONING_LN_FLOOR: f64 = -69.07755278982137; // ln(1e-30)

fn ln_pow(x: f64, e: f64) -> f64 {
    if e == 0.0 {
        0.0
    } else {
        e * x.ln()
    }
}

const MAX_DIAGONALS: usize = 4096;
const MAX_GROUPED_TERMS: usize = 50_000;
const RESCALE_LIMIT: f64 = 1.3407807929942597e154; // 2^512
const RESCALE_DOWN: f64 = 7.458340731200207e-155; // 2^-512
const LN_RESCALE: f64 = 512.0 * std::f64::consts::LN_2;
// The grouped evaluator rescales in half-size units so that the product
// of two in-range factors can never overflow.
const GROUP_LIMIT: f64 = 1.157920892373162e77; // 2^256
const GROUP_DOWN: f64 = 8.636168555094445e-78; // 2^-256
const LN_GROUP: f64 = 256.0 * std::f64::consts::LN_2;

/// Log of the canonical series Φ, accumulated diagonal by diagonal in
/// the total order k₁+k₂; a diagonal whose relative contribution stays
/// below 1e-10 three times in a row ends the sum.
pub(crate) fn ln_phi_diagonal(mu: f64, nu: f64, z: f64, x2: f64) -> Result<f64, StochasticError> {
    if z == 0.0 && x2 == 0.0 {
        return Ok(-ln_gamma(nu));
    }
    // cols[k1] holds the term at (k1, d - k1) of the current diagonal d,
    // scaled by exp(-scale_ln + ln_gamma(nu)).
    let mut cols = vec![1.0f64];
    let mut scale_ln = -ln_gamma(nu);
    let mut total = 1.0f64;
    let mut low_streak = 0;
    for d in 1..=MAX_DIAGONALS {
        let df = d as f64;
        let old_last = cols[d - 1];
        for (k1, col) in cols.iter_mut().enumerate() {
            let k2 = df - k1 as f64;
            *col *= x2 * (mu + k2 - 1.0) / ((nu + df - 1.0) * k2);
        }
        cols.push(old_last * z / (df * (nu + df - 1.0)));
        let dsum: f64 = cols.iter().sum();
        total += dsum;
        if dsum <= total * 1e-10 {
            low_streak += 1;
            if low_streak >= 3 {
                return Ok(total.ln() + scale_ln);
            }
        } else {
            low_streak = 0;
        }
        let peak = cols.iter().fold(0.0f64, |m, &v| m.max(v));
        if peak > RESCALE_LIMIT {
            for col in &mut cols {
                *col *= RESCALE_DOWN;
            }
            total *= RESCALE_DOWN;
            scale_ln += LN_RESCALE;
        }
    }
    Err(StochasticError::SeriesDivergence(MAX_DIAGONALS))
}

/// Log of the same series Φ, grouped by the total power n = k₁+k₂ of
/// b̃: Φ = Σ_n b̃ⁿ P_n / Γ(ν+n) where the P_n are the coefficients of
/// exp(ãt)(1−t)^{−μ} and follow a three-term recurrence. One pass of
/// the recurrence covers a whole row of density evaluations cheaply;
/// agreement with [`ln_phi_diagonal`] is enforced by tests.
pub(crate) fn ln_phi_grouped(
    mu: f64,
    nu: f64,
    a_tilde: f64,
    b_tilde: f64,
) -> Result<f64, StochasticError> {
    if b_tilde == 0.0 {
        return Ok(-ln_gamma(nu));
    }
    let mut p_prev = 0.0f64;
    let mut p_cur = 1.0f64;
    let mut ep: i64 = 0; // exponent of p in units of 2^256
    let mut q = 1.0f64; // b̃^n Γ(ν)/Γ(ν+n), scaled
    let mut eq: i64 = 0;
    let mut acc = 0.0f64;
    let mut e_acc: i64 = 0;
    let mut dead_streak = 0;
    for n in 0..MAX_GROUPED_TERMS {
        let term = p_cur * q;
        let e_term = ep + eq;
        if e_term > e_acc {
            acc = acc * pow2_units(e_acc - e_term) + term;
            e_acc = e_term;
        } else {
            acc += term * pow2_units(e_term - e_acc);
        }
        let rel = term * pow2_units(e_term - e_acc);
        if rel < acc * 1e-18 {
            dead_streak += 1;
            if dead_streak >= 3 {
                break;
            }
        } else {
            dead_streak = 0;
        }
        let nf = n as f64;
        let p_next = if mu == 0.0 {
            // P_n = ãⁿ/n! exactly; the three-term recurrence is unstable
            // here because its parasitic solution decays only like 1/n
            // while the true coefficients decay factorially.
            p_cur * a_tilde / (nf + 1.0)
        } else {
            ((nf + a_tilde + mu) * p_cur - a_tilde * p_prev) / (nf + 1.0)
        };
        p_prev = p_cur;
        p_cur = p_next;
        q *= b_tilde / (nu + nf);
        if p_cur > GROUP_LIMIT {
            p_cur *= GROUP_DOWN;
            p_prev *= GROUP_DOWN;
            ep += 1;
        } else if p_cur < GROUP_DOWN && p_cur > 0.0 {
            p_cur *= GROUP_LIMIT;
            p_prev *= GROUP_LIMIT;
            ep -= 1;
        }
        if q > GROUP_LIMIT {
            q *= GROUP_DOWN;
            eq += 1;
        } else if q < GROUP_DOWN && q > 0.0 {
            q *= GROUP_LIMIT;
            eq -= 1;
        }
        if n + 1 == MAX_GROUPED_TERMS {
            return Err(StochasticError::SeriesDivergence(MAX_GROUPED_TERMS));
        }
    }
    Ok(acc.ln() + LN_GROUP * e_acc as f64 - ln_gamma(nu))
}

fn pow2_units(units: i64) -> f64 {
    // units is 0 or negative here; each unit is a factor 2^256.
    match units {
        0 => 1.0,
        -1 => GROUP_DOWN,
        -2 => GROUP_DOWN * GROUP_DOWN,
        -3 => GROUP_DOWN * GROUP_DOWN * GROUP_DOWN,
        _ => 0.0,
    }
}

/// Normalization gate: integrates the literal series form over ten
/// standard deviations per axis with a coarse midpoint rule; total mass
/// outside [0.99, 1.01] (or a series failure) rejects the literal form
/// in favor of the corrected one. Memoized per parameter set.
fn select_form(w_slot: GammaMarginal, y_slot: GammaMarginal, eta: f64) -> JointForm {
    static GATE: OnceLock<Mutex<HashMap<[u64; 5], JointForm>>> = OnceLock::new();
    let key = [
        w_slot.shape.to_bits(),
        w_slot.rate.to_bits(),
        y_slot.shape.to_bits(),
        y_slot.rate.to_bits(),
        eta.to_bits(),
    ];
    let memo = GATE.get_or_init(|| Mutex::new(HashMap::new()));
    if let Some(&form) = memo.lock().unwrap().get(&key) {
        return form;
    }
    let form = match literal_form_mass(w_slot, y_slot, eta) {
        Ok(mass) if (0.99..=1.01).contains(&mass) => JointForm::AsPrinted,
        _ => JointForm::Corrected,
    };
    memo.lock().unwrap().insert(key, form);
    form
}

fn literal_form_mass(
    w_slot: GammaMarginal,
    y_slot: GammaMarginal,
    eta: f64,
) -> Result<f64, StochasticError> {
    const STEPS: usize = 48;
    let w_hi = w_slot.mean() + 10.0 * w_slot.variance().sqrt();
    let y_hi = y_slot.mean() + 10.0 * y_slot.variance().sqrt();
    let dw = w_hi / STEPS as f64;
    let dy = y_hi / STEPS as f64;
    let om = 1.0 - eta;
    let mu = y_slot.shape - w_slot.shape;
    let nu = y_slot.shape;
    let mut mass = 0.0;
    for i in 0..STEPS {
        let w = (i as f64 + 0.5) * dw;
        let a = w_slot.rate * w;
        for j in 0..STEPS {
            let y = (j as f64 + 0.5) * dy;
            let b = y_slot.rate * y;
            let a_tilde = a / om;
            let b_tilde = eta * eta * b / om;
            let ln_phi = ln_phi_diagonal(mu, nu, a_tilde * b_tilde, b_tilde)?;
            let ln_f = ln_pow(a, w_slot.shape - 1.0) + ln_pow(b, y_slot.shape - 1.0)
                - (a + b) / om
                - w_slot.shape * om.ln()
                - ln_gamma(w_slot.shape)
                + ln_phi;
            mass += ln_f.exp() * dw * dy;
        }
    }
    Ok(mass)
}
