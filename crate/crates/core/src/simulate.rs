//! Synthetic event data from Poisson and Hawkes-type generators.
//!
//! Sequences are drawn with Ogata's thinning. Between events every generator
//! here has an intensity that is bounded by its value at the start of the
//! interval once the sinusoid is replaced by its amplitude and inhibitory
//! terms are dropped, so that bound is used as the piecewise-constant
//! dominating rate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Event, EventSequence};
use crate::error::{Error, Result};

const MAX_BOUND_DOUBLINGS: u32 = 60;
const MAX_EMPTY_REDRAWS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum GeneratorKind {
    HomPoisson,
    InhomPoisson,
    Hawkes,
    InhibitHawkes,
    MixedHawkes,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Link {
    /// `max(0, x)`; only reached when the pre-activation is already nonnegative
    /// for valid specs.
    #[default]
    Identity,
    /// `log(1 + e^x)`.
    Softplus,
}

impl Link {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Link::Identity => x.max(0.0),
            Link::Softplus => softplus(x),
        }
    }
}

#[inline]
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn default_period() -> f64 {
    1.0
}

fn default_decay() -> f64 {
    1.0
}

/// Ground-truth intensity family:
/// `lambda_c(t) = link(mu_c + a sin(2 pi t / P) + sum_n A[c][c_n] exp(-beta (t - t_n)))`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub kind: GeneratorKind,
    pub base_rates: Vec<f64>,
    #[serde(default)]
    pub sin_amplitude: f64,
    #[serde(default = "default_period")]
    pub sin_period: f64,
    /// `C x C`, row = affected type, column = source type. Empty means all zero.
    #[serde(default)]
    pub excitation: Vec<Vec<f64>>,
    #[serde(default = "default_decay")]
    pub decay: f64,
    #[serde(default)]
    pub link: Link,
}

impl GeneratorSpec {
    pub fn hom_poisson(base_rates: Vec<f64>) -> Self {
        GeneratorSpec {
            kind: GeneratorKind::HomPoisson,
            base_rates,
            sin_amplitude: 0.0,
            sin_period: 1.0,
            excitation: Vec::new(),
            decay: 1.0,
            link: Link::Identity,
        }
    }

    pub fn inhom_poisson(base_rates: Vec<f64>, amplitude: f64, period: f64) -> Self {
        GeneratorSpec {
            kind: GeneratorKind::InhomPoisson,
            sin_amplitude: amplitude,
            sin_period: period,
            ..Self::hom_poisson(base_rates)
        }
    }

    pub fn hawkes(kind: GeneratorKind, base_rates: Vec<f64>, excitation: Vec<Vec<f64>>, decay: f64, link: Link) -> Self {
        GeneratorSpec {
            kind,
            base_rates,
            sin_amplitude: 0.0,
            sin_period: 1.0,
            excitation,
            decay,
            link,
        }
    }

    pub fn num_types(&self) -> usize {
        self.base_rates.len()
    }

    #[inline]
    fn excitation_at(&self, c: usize, source: usize) -> f64 {
        if self.excitation.is_empty() {
            0.0
        } else {
            self.excitation[c][source]
        }
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.num_types();
        let bad = |msg: String| Err(Error::Config(format!("{:?} generator: {msg}", self.kind)));
        if c == 0 {
            return bad("no event types".into());
        }
        if self.base_rates.iter().any(|&m| !(m.is_finite() && m >= 0.0)) {
            return bad("base rates must be finite and nonnegative".into());
        }
        if !self.excitation.is_empty()
            && (self.excitation.len() != c || self.excitation.iter().any(|r| r.len() != c))
        {
            return bad(format!("excitation must be {c}x{c}"));
        }
        if self.excitation.iter().flatten().any(|v| !v.is_finite()) {
            return bad("excitation entries must be finite".into());
        }
        if !(self.decay.is_finite() && self.decay > 0.0) {
            return bad("decay must be positive".into());
        }
        if !self.sin_amplitude.is_finite() || !(self.sin_period.is_finite() && self.sin_period > 0.0) {
            return bad("sinusoid amplitude must be finite and period positive".into());
        }
        let has_excitation = self.excitation.iter().flatten().any(|&v| v != 0.0);
        match self.kind {
            GeneratorKind::HomPoisson | GeneratorKind::InhomPoisson => {
                if has_excitation {
                    return bad("Poisson generators take no excitation".into());
                }
                if self.kind == GeneratorKind::HomPoisson && self.sin_amplitude != 0.0 {
                    return bad("homogeneous Poisson takes no sinusoid".into());
                }
            }
            GeneratorKind::Hawkes => {
                if self.link == Link::Identity {
                    if self.excitation.iter().flatten().any(|&v| v < 0.0) {
                        return bad("identity-link Hawkes needs nonnegative excitation".into());
                    }
                    let rho = self.branching_radius();
                    if rho >= 1.0 {
                        return bad(format!("spectral radius of A/beta is {rho:.4}, must be < 1"));
                    }
                }
            }
            GeneratorKind::InhibitHawkes | GeneratorKind::MixedHawkes => {
                if self.link != Link::Softplus {
                    return bad("inhibitory generators need the softplus link".into());
                }
            }
        }
        Ok(())
    }

    /// Spectral radius of `|A| / beta`, by repeated squaring with
    /// renormalization (Gelfand's formula on `2^12` powers).
    pub fn branching_radius(&self) -> f64 {
        let c = self.num_types();
        if self.excitation.is_empty() {
            return 0.0;
        }
        let mut b: Vec<Vec<f64>> = self
            .excitation
            .iter()
            .map(|r| r.iter().map(|v| v.abs() / self.decay).collect())
            .collect();
        let mut log_scale = 0.0;
        let mut power = 1.0;
        for _ in 0..12 {
            let norm = b.iter().map(|r| r.iter().sum::<f64>()).fold(0.0, f64::max);
            if norm == 0.0 {
                return 0.0;
            }
            for r in b.iter_mut() {
                for v in r.iter_mut() {
                    *v /= norm;
                }
            }
            log_scale += norm.ln() / power;
            let mut sq = vec![vec![0.0; c]; c];
            for i in 0..c {
                for k in 0..c {
                    for j in 0..c {
                        sq[i][j] += b[i][k] * b[k][j];
                    }
                }
            }
            b = sq;
            power *= 2.0;
        }
        let norm = b.iter().map(|r| r.iter().sum::<f64>()).fold(0.0, f64::max);
        (log_scale + norm.ln() / power).exp()
    }

    #[inline]
    fn sinusoid(&self, t: f64) -> f64 {
        if self.sin_amplitude == 0.0 {
            0.0
        } else {
            self.sin_amplitude * (2.0 * std::f64::consts::PI * t / self.sin_period).sin()
        }
    }
}

/// Per-type ground-truth intensity at `t` given the events strictly before `t`.
pub fn ground_truth_intensity(spec: &GeneratorSpec, history: &[Event], t: f64) -> Vec<f64> {
    let c = spec.num_types();
    let mut decayed = vec![0.0; c];
    for e in history.iter().filter(|e| e.time < t) {
        decayed[e.type_id] += (-spec.decay * (t - e.time)).exp();
    }
    intensity_from_state(spec, &decayed, t)
}

fn intensity_from_state(spec: &GeneratorSpec, decayed: &[f64], t: f64) -> Vec<f64> {
    let sin = spec.sinusoid(t);
    (0..spec.num_types())
        .map(|c| {
            let drive: f64 = decayed
                .iter()
                .enumerate()
                .map(|(src, &s)| spec.excitation_at(c, src) * s)
                .sum();
            spec.link.apply(spec.base_rates[c] + sin + drive)
        })
        .collect()
}

/// Rate that dominates the total intensity from `t` until the next event.
fn dominating_rate(spec: &GeneratorSpec, decayed: &[f64]) -> f64 {
    let amp = spec.sin_amplitude.abs();
    (0..spec.num_types())
        .map(|c| {
            let drive: f64 = decayed
                .iter()
                .enumerate()
                .map(|(src, &s)| spec.excitation_at(c, src).max(0.0) * s)
                .sum();
            spec.link.apply(spec.base_rates[c] + amp + drive)
        })
        .sum()
}

/// Draws one realization on `(0, horizon]`. May return no events.
pub fn thinning_events<R: Rng>(spec: &GeneratorSpec, horizon: f64, rng: &mut R) -> Result<Vec<Event>> {
    let c = spec.num_types();
    let mut events: Vec<Event> = Vec::new();
    let mut decayed = vec![0.0; c];
    let mut t = 0.0;
    let mut inflation = 1.0;
    let mut doublings = 0;
    loop {
        let bound = dominating_rate(spec, &decayed) * inflation;
        if bound <= 0.0 {
            break;
        }
        let u: f64 = 1.0 - rng.gen::<f64>();
        let candidate = t - u.ln() / bound;
        if candidate > horizon {
            break;
        }
        let factor = (-spec.decay * (candidate - t)).exp();
        let next_state: Vec<f64> = decayed.iter().map(|s| s * factor).collect();
        let rates = intensity_from_state(spec, &next_state, candidate);
        let total: f64 = rates.iter().sum();
        if total > bound * (1.0 + 1e-12) {
            doublings += 1;
            if doublings > MAX_BOUND_DOUBLINGS {
                return Err(Error::Numerical(format!(
                    "thinning bound exceeded {MAX_BOUND_DOUBLINGS} times: intensity {total} > bound {bound} at t={candidate}"
                )));
            }
            inflation *= 2.0;
            continue;
        }
        inflation = 1.0;
        doublings = 0;
        t = candidate;
        decayed = next_state;
        let accept: f64 = 1.0 - rng.gen::<f64>();
        if total > 0.0 && accept * bound <= total {
            let pick = rng.gen::<f64>() * total;
            let mut acc = 0.0;
            let mut type_id = c - 1;
            for (k, &r) in rates.iter().enumerate() {
                acc += r;
                if pick < acc && r > 0.0 {
                    type_id = k;
                    break;
                }
            }
            let mut time = t;
            if let Some(last) = events.last() {
                if time <= last.time {
                    time = last.time.next_up();
                    if time > horizon {
                        break;
                    }
                    t = time;
                }
            }
            events.push(Event::new(time, type_id));
            decayed[type_id] += 1.0;
        }
    }
    Ok(events)
}

/// Stream for sequence `index` of a run seeded with `seed`.
pub fn sequence_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn nonempty_events<R: Rng>(spec: &GeneratorSpec, horizon: f64, rng: &mut R) -> Result<Vec<Event>> {
    for _ in 0..MAX_EMPTY_REDRAWS {
        let events = thinning_events(spec, horizon, rng)?;
        if !events.is_empty() {
            return Ok(events);
        }
    }
    Err(Error::Numerical(format!(
        "{:?} generator produced {MAX_EMPTY_REDRAWS} empty sequences in a row",
        spec.kind
    )))
}

/// One nonempty sequence, deterministic in `seed`. Empty draws are redrawn
/// from the same stream.
pub fn thinning_sample(spec: &GeneratorSpec, horizon: f64, seed: u64) -> Result<EventSequence> {
    spec.validate()?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::Config(format!("horizon {horizon} must be positive")));
    }
    let mut rng = sequence_rng(seed, 0);
    let events = nonempty_events(spec, horizon, &mut rng)?;
    EventSequence::new(format!("sample-{seed}"), events, horizon, None)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticPlan {
    pub cluster_specs: Vec<GeneratorSpec>,
    pub sequences_per_cluster: usize,
    pub num_types: usize,
    pub horizon: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SyntheticPlan {
    pub fn validate(&self) -> Result<()> {
        if self.cluster_specs.is_empty() {
            return Err(Error::Config("plan has no cluster specs".into()));
        }
        if self.sequences_per_cluster == 0 || self.cluster_specs.len() * self.sequences_per_cluster < 2 {
            return Err(Error::Config("plan must produce at least 2 sequences".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(Error::Config(format!("horizon {} must be positive", self.horizon)));
        }
        for (k, spec) in self.cluster_specs.iter().enumerate() {
            if spec.num_types() != self.num_types {
                return Err(Error::Config(format!(
                    "cluster {k} has {} types, plan has {}",
                    spec.num_types(),
                    self.num_types
                )));
            }
            spec.validate()?;
        }
        Ok(())
    }

    /// Two clusters, five types, horizon 50, about 48 events per sequence:
    /// a mutually exciting Hawkes process against a sinusoidally modulated
    /// Poisson process; the families differ in count level, type mix and timing.
    pub fn two_cluster_desk(sequences_per_cluster: usize, seed: u64) -> Self {
        let c = 5;
        SyntheticPlan {
            cluster_specs: vec![hawkes_preset(c), inhom_preset(c)],
            sequences_per_cluster,
            num_types: c,
            horizon: 50.0,
            seed,
        }
    }

    /// The four families (inhomogeneous Poisson, inhibition, excitation,
    /// mixed), five types, 33 to 62 events per sequence by family.
    pub fn four_family(sequences_per_cluster: usize, seed: u64) -> Self {
        let c = 5;
        SyntheticPlan {
            cluster_specs: vec![inhom_preset(c), inhibit_preset(c), hawkes_preset(c), mixed_preset(c)],
            sequences_per_cluster,
            num_types: c,
            horizon: 50.0,
            seed,
        }
    }
}

fn hawkes_preset(c: usize) -> GeneratorSpec {
    let excitation = (0..c)
        .map(|i| (0..c).map(|j| if i == j { 0.12 } else { 0.02 }).collect())
        .collect();
    // about 62 events, weighted toward the low type indices
    let base = (0..c).map(|i| 0.30 - 0.20 * i as f64 / (c - 1).max(1) as f64).collect();
    GeneratorSpec::hawkes(GeneratorKind::Hawkes, base, excitation, 1.0, Link::Identity)
}

fn inhom_preset(c: usize) -> GeneratorSpec {
    // about 33 events, weighted toward the high type indices; the rate swells
    // to a peak mid-horizon and falls back to the base at both ends
    let base = (0..c).map(|i| 0.05 + 0.10 * i as f64 / (c - 1).max(1) as f64).collect();
    GeneratorSpec::inhom_poisson(base, 0.05, 100.0)
}

fn inhibit_preset(c: usize) -> GeneratorSpec {
    GeneratorSpec::hawkes(GeneratorKind::InhibitHawkes, vec![0.0; c], vec![vec![-1.8; c]; c], 1.0, Link::Softplus)
}

fn mixed_preset(c: usize) -> GeneratorSpec {
    let excitation = (0..c)
        .map(|i| (0..c).map(|j| if i == j { 0.5 } else { -4.0 }).collect())
        .collect();
    GeneratorSpec::hawkes(GeneratorKind::MixedHawkes, vec![0.0; c], excitation, 1.0, Link::Softplus)
}

/// Labeled dataset, one block of sequences per cluster spec. Sequence `i`
/// uses stream `i` of the plan seed, so the result does not depend on how
/// the work is scheduled.
pub fn make_synthetic(plan: &SyntheticPlan) -> Result<Dataset> {
    plan.validate()?;
    let per = plan.sequences_per_cluster;
    let total = plan.cluster_specs.len() * per;
    let sequences: Vec<EventSequence> = (0..total)
        .into_par_iter()
        .map(|i| {
            let label = i / per;
            let mut rng = sequence_rng(plan.seed, i as u64);
            let events = nonempty_events(&plan.cluster_specs[label], plan.horizon, &mut rng)?;
            EventSequence::new(format!("seq-{i:05}"), events, plan.horizon, Some(label))
        })
        .collect::<Result<_>>()?;
    Dataset::new(sequences, plan.num_types, plan.horizon)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn exp_cdf(rate: f64) -> impl Fn(f64) -> f64 {
        move |x| 1.0 - (-rate * x).exp()
    }

    /// Kolmogorov-Smirnov statistic against a continuous CDF.
    fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n = xs.len() as f64;
        xs.iter()
            .enumerate()
            .map(|(i, &x)| {
                let f = cdf(x);
                (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn hom_poisson_intensity_is_constant() {
        let spec = GeneratorSpec::hom_poisson(vec![2.0]);
        for t in [0.1, 3.0, 99.0] {
            assert_eq!(ground_truth_intensity(&spec, &[], t), vec![2.0]);
        }
    }

    #[test]
    fn hawkes_intensity_hand_value() {
        let spec = GeneratorSpec::hawkes(GeneratorKind::Hawkes, vec![1.0], vec![vec![0.5]], 1.0, Link::Identity);
        let l = ground_truth_intensity(&spec, &[Event::new(0.0, 0)], std::f64::consts::LN_2);
        assert!((l[0] - 1.25).abs() < 1e-15);
    }

    #[test]
    fn inhibition_with_softplus_stays_nonnegative() {
        let spec = GeneratorSpec::hawkes(
            GeneratorKind::InhibitHawkes,
            vec![0.5, 0.5],
            vec![vec![-50.0, -50.0], vec![-50.0, -50.0]],
            1.0,
            Link::Softplus,
        );
        spec.validate().unwrap();
        let history: Vec<Event> = (0..20).map(|i| Event::new(i as f64 * 0.1, i % 2)).collect();
        for k in 1..200 {
            let t = 2.0 + k as f64 * 0.05;
            assert!(ground_truth_intensity(&spec, &history, t).iter().all(|&r| r >= 0.0));
        }
        let seq = thinning_sample(&spec, 20.0, 3).unwrap();
        assert!(seq.len() >= 1);
    }

    #[test]
    fn validation_rules() {
        let mut s = GeneratorSpec::hom_poisson(vec![1.0]);
        s.excitation = vec![vec![0.1]];
        assert!(s.validate().is_err());
        let s = GeneratorSpec::hawkes(GeneratorKind::Hawkes, vec![1.0], vec![vec![1.5]], 1.0, Link::Identity);
        assert!(s.validate().is_err());
        let s = GeneratorSpec::hawkes(GeneratorKind::Hawkes, vec![1.0], vec![vec![-0.1]], 1.0, Link::Identity);
        assert!(s.validate().is_err());
        let s = GeneratorSpec::hawkes(GeneratorKind::InhibitHawkes, vec![1.0], vec![vec![-0.1]], 1.0, Link::Identity);
        assert!(s.validate().is_err());
        let s = GeneratorSpec::hawkes(GeneratorKind::Hawkes, vec![1.0, 1.0], vec![vec![0.3, 0.3]; 2], 1.0, Link::Identity);
        assert!((s.branching_radius() - 0.6).abs() < 1e-9);
        s.validate().unwrap();
    }

    #[test]
    fn sampler_is_deterministic_and_valid() {
        for spec in SyntheticPlan::four_family(1, 0).cluster_specs {
            let a = thinning_sample(&spec, 50.0, 9).unwrap();
            let b = thinning_sample(&spec, 50.0, 9).unwrap();
            assert_eq!(a, b);
            assert!(a.events().windows(2).all(|w| w[0].time < w[1].time));
            assert!(a.events().iter().all(|e| e.time > 0.0 && e.time <= 50.0 && e.type_id < 5));
        }
    }

    #[test]
    fn accepted_events_have_positive_intensity() {
        let spec = SyntheticPlan::four_family(1, 0).cluster_specs[1].clone();
        let seq = thinning_sample(&spec, 50.0, 4).unwrap();
        for (n, e) in seq.events().iter().enumerate() {
            let rates = ground_truth_intensity(&spec, &seq.events()[..n], e.time);
            assert!(rates.iter().sum::<f64>() > 0.0);
            assert!(rates[e.type_id] > 0.0);
        }
    }

    #[test]
    fn zero_rate_spec_has_no_events() {
        let spec = GeneratorSpec::hom_poisson(vec![0.0, 0.0]);
        let mut rng = sequence_rng(1, 0);
        assert!(thinning_events(&spec, 10.0, &mut rng).unwrap().is_empty());
        assert!(thinning_sample(&spec, 10.0, 1).is_err());
    }

    #[test]
    fn hom_poisson_gaps_pass_ks() {
        let spec = GeneratorSpec::hom_poisson(vec![0.5, 1.5]);
        let mut gaps = Vec::new();
        let mut counts = [0usize; 2];
        let mut i = 0;
        while gaps.len() < 10_000 {
            let mut rng = sequence_rng(7, i);
            i += 1;
            // one long window, so horizon censoring only touches the last gap
            let events = thinning_events(&spec, 6000.0, &mut rng).unwrap();
            let mut prev = 0.0;
            for e in &events {
                gaps.push(e.time - prev);
                prev = e.time;
                counts[e.type_id] += 1;
            }
        }
        gaps.truncate(10_000);
        let d = ks_statistic(gaps, exp_cdf(2.0));
        // asymptotic critical value at significance 0.01
        let crit = 1.628 / (10_000f64).sqrt();
        assert!(d < crit, "KS statistic {d} >= {crit}");

        let n = (counts[0] + counts[1]) as f64;
        let p = 0.25;
        let se = (p * (1.0 - p) / n).sqrt();
        assert!((counts[0] as f64 / n - p).abs() < 3.0 * se, "{} {n} {se}", counts[0] as f64 / n);
    }

    #[test]
    fn make_synthetic_counts_and_determinism() {
        let mut plan = SyntheticPlan::two_cluster_desk(100, 5);
        let a = make_synthetic(&plan).unwrap();
        assert_eq!(a.len(), 200);
        let labels = a.labels().unwrap();
        assert_eq!(labels.iter().filter(|&&l| l == 0).count(), 100);
        assert_eq!(labels.iter().filter(|&&l| l == 1).count(), 100);
        assert_eq!(a, make_synthetic(&plan).unwrap());
        plan.seed = 6;
        assert_ne!(a, make_synthetic(&plan).unwrap());
    }

    #[test]
    fn plan_rejects_type_mismatch() {
        let mut plan = SyntheticPlan::two_cluster_desk(2, 0);
        plan.num_types = 4;
        assert!(make_synthetic(&plan).is_err());
    }
}
