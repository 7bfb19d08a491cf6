//! Quadratic measurement model `z = H ×₁ x ×₂ x + ε` and synthetic state series.
//!
//! States are encoded as `[x_r_1 .. x_r_K, x_i_1 .. x_i_K]`: bus `k` (1-based)
//! owns coordinates `k - 1` (real part) and `K + k - 1` (imaginary part).

use std::collections::BTreeSet;
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, Error, Result};
use crate::linalg::{Matrix, Tensor3, Vector};
use crate::rng::seeded;

/// Default standard deviation of the Gaussian noise on measurements and
/// on the synthetic state readings.
pub const DEFAULT_NOISE_SIGMA: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GridTopology {
    bus_count: usize,
    lines: Vec<(usize, usize)>,
}

impl GridTopology {
    /// Buses are numbered `1..=bus_count`; each line is an ordered pair.
    pub fn new(bus_count: usize, lines: Vec<(usize, usize)>) -> Result<Self> {
        if bus_count < 2 {
            return Err(Error::Topology(format!(
                "need at least 2 buses, got {bus_count}"
            )));
        }
        let mut seen = BTreeSet::new();
        for &(k, j) in &lines {
            if k == 0 || j == 0 || k > bus_count || j > bus_count {
                return Err(Error::Topology(format!(
                    "line ({k}, {j}) references a bus outside 1..={bus_count}"
                )));
            }
            if k == j {
                return Err(Error::Topology(format!("self-loop at bus {k}")));
            }
            if !seen.insert((k, j)) {
                return Err(Error::Topology(format!("duplicate line ({k}, {j})")));
            }
        }
        Ok(GridTopology { bus_count, lines })
    }

    /// A radial feeder `1-2-3-...-K`.
    pub fn chain(bus_count: usize) -> Result<Self> {
        GridTopology::new(bus_count, (1..bus_count).map(|k| (k, k + 1)).collect())
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn lines(&self) -> &[(usize, usize)] {
        &self.lines
    }

    pub fn state_dim(&self) -> usize {
        2 * self.bus_count
    }

    fn neighbours(&self, k: usize) -> BTreeSet<usize> {
        let mut set: BTreeSet<usize> = self
            .lines
            .iter()
            .filter_map(|&(a, b)| {
                if a == k {
                    Some(b)
                } else if b == k {
                    Some(a)
                } else {
                    None
                }
            })
            .collect();
        set.insert(k);
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelKind {
    VmagSq,
    PInj,
    QInj,
    PfBegin,
    QfBegin,
    PfEnd,
    QfEnd,
}

impl ChannelKind {
    pub const ALL: [ChannelKind; 7] = [
        ChannelKind::VmagSq,
        ChannelKind::PInj,
        ChannelKind::QInj,
        ChannelKind::PfBegin,
        ChannelKind::QfBegin,
        ChannelKind::PfEnd,
        ChannelKind::QfEnd,
    ];

    fn is_bus_channel(self) -> bool {
        matches!(
            self,
            ChannelKind::VmagSq | ChannelKind::PInj | ChannelKind::QInj
        )
    }

    fn tag(self) -> &'static str {
        match self {
            ChannelKind::VmagSq => "vmag2",
            ChannelKind::PInj => "p_inj",
            ChannelKind::QInj => "q_inj",
            ChannelKind::PfBegin => "pf_begin",
            ChannelKind::QfBegin => "qf_begin",
            ChannelKind::PfEnd => "pf_end",
            ChannelKind::QfEnd => "qf_end",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelLabel {
    Bus { kind: ChannelKind, bus: usize },
    Line { kind: ChannelKind, from: usize, to: usize },
}

impl fmt::Display for ChannelLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            ChannelLabel::Bus { kind, bus } => write!(f, "{}[{bus}]", kind.tag()),
            ChannelLabel::Line { kind, from, to } => write!(f, "{}[{from},{to}]", kind.tag()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementTensor {
    tensor: Tensor3,
    labels: Vec<ChannelLabel>,
}

impl MeasurementTensor {
    pub fn tensor(&self) -> &Tensor3 {
        &self.tensor
    }

    pub fn labels(&self) -> &[ChannelLabel] {
        &self.labels
    }

    pub fn channel_count(&self) -> usize {
        self.labels.len()
    }

    pub fn state_dim(&self) -> usize {
        self.tensor.dims().0
    }
}

/// Builds one slice per channel of the requested kinds, in the order
/// bus channels (per kind, per bus) then line channels (per kind, per line).
///
/// `|V_k|²` slices are exact: a unit diagonal on bus `k`'s two coordinates.
/// Injection slices are random symmetric blocks over bus `k` and its
/// neighbours; flow slices over the two endpoint buses. Entries are uniform
/// in `[-1, 1]`.
pub fn build_measurement_tensor(
    topology: &GridTopology,
    kinds: &[ChannelKind],
    seed: u64,
) -> MeasurementTensor {
    let k_count = topology.bus_count();
    let dim = topology.state_dim();
    let mut rng = seeded(seed);
    let mut slices = Vec::new();
    let mut labels = Vec::new();

    let coords = |buses: &BTreeSet<usize>| -> Vec<usize> {
        let mut c: Vec<usize> = buses.iter().map(|&b| b - 1).collect();
        c.extend(buses.iter().map(|&b| k_count + b - 1));
        c
    };
    let random_block = |support: &[usize], rng: &mut crate::rng::Rng| {
        let mut m = Matrix::zeros(dim, dim);
        for (ai, &a) in support.iter().enumerate() {
            for &b in &support[..=ai] {
                let v = rng.random_range(-1.0..=1.0);
                m.set(a, b, v);
                m.set(b, a, v);
            }
        }
        m
    };

    for &kind in ChannelKind::ALL.iter().filter(|k| kinds.contains(k)) {
        if kind.is_bus_channel() {
            for bus in 1..=k_count {
                let slice = if kind == ChannelKind::VmagSq {
                    let mut m = Matrix::zeros(dim, dim);
                    m.set(bus - 1, bus - 1, 1.0);
                    m.set(k_count + bus - 1, k_count + bus - 1, 1.0);
                    m
                } else {
                    random_block(&coords(&topology.neighbours(bus)), &mut rng)
                };
                slices.push(slice);
                labels.push(ChannelLabel::Bus { kind, bus });
            }
        } else {
            for &(from, to) in topology.lines() {
                let buses: BTreeSet<usize> = [from, to].into_iter().collect();
                slices.push(random_block(&coords(&buses), &mut rng));
                labels.push(ChannelLabel::Line { kind, from, to });
            }
        }
    }

    let tensor = if slices.is_empty() {
        Tensor3::zeros(dim, dim, 0)
    } else {
        Tensor3::from_slices(&slices).expect("slices share one shape")
    };
    MeasurementTensor { tensor, labels }
}

/// `z = H ×₁ x ×₂ x + ε`, `ε ~ N(0, noise_sigma²)` i.i.d. from `seed`.
pub fn measure(
    h: &MeasurementTensor,
    x: &Vector,
    noise_sigma: f64,
    seed: u64,
) -> Result<Vector> {
    if !(noise_sigma >= 0.0 && noise_sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise_sigma must be finite and non-negative, got {noise_sigma}"
        )));
    }
    let mut z = h.tensor.mode_product_quadratic(x)?;
    if noise_sigma > 0.0 {
        let normal = Normal::new(0.0, noise_sigma).expect("valid sigma");
        let mut rng = seeded(seed);
        for v in z.as_mut_slice() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(z)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoadProfile {
    SinusoidalLoad,
    RandomWalk,
}

impl std::str::FromStr for LoadProfile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sinusoidal_load" => Ok(LoadProfile::SinusoidalLoad),
            "random_walk" => Ok(LoadProfile::RandomWalk),
            other => Err(Error::Config(format!("unknown profile `{other}`"))),
        }
    }
}

/// `T` state vectors of dimension `2K`.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSeries {
    bus_count: usize,
    states: Vec<Vector>,
}

impl StateSeries {
    pub fn new(bus_count: usize, states: Vec<Vector>) -> Result<Self> {
        if states.is_empty() {
            return Err(Error::EmptySequence("state series"));
        }
        for s in &states {
            check_dim("state series", 2 * bus_count, s.dim())?;
            if !s.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("state series"));
            }
        }
        Ok(StateSeries { bus_count, states })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn bus_count(&self) -> usize {
        self.bus_count
    }

    pub fn state_dim(&self) -> usize {
        2 * self.bus_count
    }

    pub fn states(&self) -> &[Vector] {
        &self.states
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> StateSeries {
        StateSeries {
            bus_count: self.bus_count,
            states: self.states[range].to_vec(),
        }
    }

    pub fn magnitude(&self, t: usize, bus: usize) -> f64 {
        let s = &self.states[t];
        s[bus - 1].hypot(s[self.bus_count + bus - 1])
    }

    pub fn magnitude_range(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in 0..self.len() {
            for bus in 1..=self.bus_count {
                let m = self.magnitude(t, bus);
                lo = lo.min(m);
                hi = hi.max(m);
            }
        }
        (lo, hi)
    }

    pub fn header(&self) -> String {
        let k = self.bus_count;
        let mut cols = vec!["t".to_string()];
        cols.extend((1..=k).map(|i| format!("x_r_{i}")));
        cols.extend((1..=k).map(|i| format!("x_i_{i}")));
        cols.join(",")
    }

    /// Header row then one row per step; reals use 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{}", self.header())?;
        for (t, s) in self.states.iter().enumerate() {
            write!(w, "{t}")?;
            for v in s.iter() {
                write!(w, ",{}", fmt_real(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = match lines.next() {
            Some(line) => line?,
            None => {
                return Err(Error::Parse {
                    line: 1,
                    message: "missing header".into(),
                })
            }
        };
        let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "t" || (cols.len() - 1) % 2 != 0 {
            return Err(Error::Parse {
                line: 1,
                message: format!("unexpected header `{header}`"),
            });
        }
        let k = (cols.len() - 1) / 2;
        let expected = StateSeries {
            bus_count: k,
            states: vec![],
        }
        .header();
        if cols.join(",") != expected {
            return Err(Error::Parse {
                line: 1,
                message: format!("expected header `{expected}`"),
            });
        }

        let mut states = Vec::new();
        for (idx, line) in lines.enumerate() {
            let line_no = idx + 2;
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            if fields.len() != 2 * k + 1 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected {} fields, found {}", 2 * k + 1, fields.len()),
                });
            }
            let values = fields[1..]
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .ok()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| Error::Parse {
                            line: line_no,
                            message: format!("invalid number `{f}`"),
                        })
                })
                .collect::<Result<Vec<f64>>>()?;
            states.push(Vector::from(values));
        }
        if states.is_empty() {
            return Err(Error::Parse {
                line: 2,
                message: "no data rows".into(),
            });
        }
        StateSeries::new(k, states)
    }
}

pub fn fmt_real(v: f64) -> String {
    format!("{v:.16e}")
}

/// Tunables for [`generate_state_series_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeriesShape {
    /// Gaussian jitter added to each magnitude and angle reading.
    pub noise_sigma: f64,
    pub daily_period: f64,
    pub weekly_period: f64,
}

impl Default for SeriesShape {
    fn default() -> Self {
        SeriesShape {
            noise_sigma: DEFAULT_NOISE_SIGMA,
            daily_period: 24.0,
            weekly_period: 168.0,
        }
    }
}

pub fn generate_state_series(
    topology: &GridTopology,
    steps: usize,
    seed: u64,
    profile: LoadProfile,
) -> Result<StateSeries> {
    generate_state_series_with(topology, steps, seed, profile, &SeriesShape::default())
}

/// Per-bus voltage trajectories `|V| e^{jθ}` with `|V|` within 1.0 ± 0.1.
///
/// `SinusoidalLoad` superposes daily and weekly cycles with per-bus phase,
/// and the angle follows the same cycles scaled by the bus's electrical
/// distance from bus 1. `RandomWalk` is an Ornstein-Uhlenbeck walk on both.
pub fn generate_state_series_with(
    topology: &GridTopology,
    steps: usize,
    seed: u64,
    profile: LoadProfile,
    shape: &SeriesShape,
) -> Result<StateSeries> {
    if steps == 0 {
        return Err(Error::Config("series length must be at least 1".into()));
    }
    if !(shape.noise_sigma >= 0.0 && shape.noise_sigma <= 0.02) {
        return Err(Error::Config(format!(
            "noise sigma must lie in [0, 0.02], got {}",
            shape.noise_sigma
        )));
    }
    let k = topology.bus_count();
    let mut rng = seeded(seed);
    let jitter = if shape.noise_sigma > 0.0 {
        Some(Normal::new(0.0, shape.noise_sigma).expect("valid sigma"))
    } else {
        None
    };
    let noise = |rng: &mut crate::rng::Rng| {
        jitter
            .map(|n| n.sample(rng).clamp(-4.0 * shape.noise_sigma, 4.0 * shape.noise_sigma))
            .unwrap_or(0.0)
    };

    struct Bus {
        mag_daily: f64,
        mag_weekly: f64,
        phase_daily: f64,
        phase_weekly: f64,
        angle_base: f64,
        angle_swing: f64,
    }
    let buses: Vec<Bus> = (0..k)
        .map(|b| Bus {
            mag_daily: rng.random_range(0.02..0.04),
            mag_weekly: rng.random_range(0.005..0.015),
            phase_daily: rng.random_range(0.0..2.0 * PI),
            phase_weekly: rng.random_range(0.0..2.0 * PI),
            angle_base: -0.05 * b as f64,
            angle_swing: rng.random_range(0.05..0.15),
        })
        .collect();

    let mut states = Vec::with_capacity(steps);
    match profile {
        LoadProfile::SinusoidalLoad => {
            for t in 0..steps {
                let tf = t as f64;
                let mut x = vec![0.0; 2 * k];
                for (b, bus) in buses.iter().enumerate() {
                    let daily = (2.0 * PI * tf / shape.daily_period + bus.phase_daily).sin();
                    let weekly = (2.0 * PI * tf / shape.weekly_period + bus.phase_weekly).sin();
                    let mag = 1.0 + bus.mag_daily * daily + bus.mag_weekly * weekly + noise(&mut rng);
                    let angle = bus.angle_base
                        + bus.angle_swing * (0.8 * daily + 0.2 * weekly)
                        + noise(&mut rng);
                    x[b] = mag * angle.cos();
                    x[k + b] = mag * angle.sin();
                }
                states.push(Vector::from(x));
            }
        }
        LoadProfile::RandomWalk => {
            let reversion = 0.05;
            let mut mag_dev = vec![0.0f64; k];
            let mut ang_dev = vec![0.0f64; k];
            let step_sd = 0.004;
            let walk = Normal::new(0.0, step_sd).expect("valid sigma");
            for _ in 0..steps {
                let mut x = vec![0.0; 2 * k];
                for (b, bus) in buses.iter().enumerate() {
                    mag_dev[b] = ((1.0 - reversion) * mag_dev[b] + walk.sample(&mut rng))
                        .clamp(-0.08, 0.08);
                    ang_dev[b] = ((1.0 - reversion) * ang_dev[b] + walk.sample(&mut rng))
                        .clamp(-0.3, 0.3);
                    let mag = 1.0 + mag_dev[b] + noise(&mut rng);
                    let angle = bus.angle_base + ang_dev[b] + noise(&mut rng);
                    x[b] = mag * angle.cos();
                    x[k + b] = mag * angle.sin();
                }
                states.push(Vector::from(x));
            }
        }
    }
    StateSeries::new(k, states)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voltage_only_channels_are_exact_identity_blocks() {
        let topo = GridTopology::new(2, vec![(1, 2)]).unwrap();
        let h = build_measurement_tensor(&topo, &[ChannelKind::VmagSq], 1);
        assert_eq!(h.channel_count(), 2);
        let s = h.tensor().slice(0);
        for a in 0..4 {
            for b in 0..4 {
                let expected = if a == b && (a == 0 || a == 2) { 1.0 } else { 0.0 };
                assert_eq!(s.get(a, b), expected);
            }
        }
        assert_eq!(h.labels()[1], ChannelLabel::Bus { kind: ChannelKind::VmagSq, bus: 2 });
    }

    #[test]
    fn full_channel_count() {
        let topo = GridTopology::new(3, vec![(1, 2), (2, 3), (1, 3)]).unwrap();
        let h = build_measurement_tensor(&topo, &ChannelKind::ALL, 9);
        let bus_labels = h
            .labels()
            .iter()
            .filter(|l| matches!(l, ChannelLabel::Bus { .. }))
            .count();
        let line_labels = h.labels().len() - bus_labels;
        assert_eq!(bus_labels, 3 + 3 + 3);
        assert_eq!(line_labels, 4 * 3);
        assert_eq!(h.tensor().dims(), (6, 6, 21));
    }

    #[test]
    fn tensor_build_is_deterministic_and_symmetric() {
        let topo = GridTopology::chain(4).unwrap();
        let a = build_measurement_tensor(&topo, &ChannelKind::ALL, 42);
        let b = build_measurement_tensor(&topo, &ChannelKind::ALL, 42);
        assert_eq!(a, b);
        for j in 0..a.channel_count() {
            assert!(a.tensor().slice(j).is_symmetric());
        }
    }

    #[test]
    fn line_slice_support_is_endpoint_coordinates() {
        let topo = GridTopology::chain(3).unwrap();
        let h = build_measurement_tensor(&topo, &[ChannelKind::PfBegin], 5);
        // line (2, 3) → coordinates 1, 2 (real) and 4, 5 (imag)
        let s = h.tensor().slice(1);
        let support = [1, 2, 4, 5];
        for a in 0..6 {
            for b in 0..6 {
                if !(support.contains(&a) && support.contains(&b)) {
                    assert_eq!(s.get(a, b), 0.0);
                }
            }
        }
    }

    #[test]
    fn invalid_topologies_rejected() {
        assert!(GridTopology::new(1, vec![]).is_err());
        assert!(GridTopology::new(3, vec![(1, 1)]).is_err());
        assert!(GridTopology::new(3, vec![(1, 2), (1, 2)]).is_err());
        assert!(GridTopology::new(3, vec![(1, 4)]).is_err());
    }

    #[test]
    fn noiseless_measurement_equals_quadratic_form() {
        let topo = GridTopology::chain(3).unwrap();
        let h = build_measurement_tensor(&topo, &ChannelKind::ALL, 2);
        let x = Vector::from(vec![1.0, 0.98, 1.02, 0.0, -0.05, 0.03]);
        let z = measure(&h, &x, 0.0, 77).unwrap();
        assert_eq!(z, h.tensor().mode_product_quadratic(&x).unwrap());
        let zero = measure(&h, &Vector::zeros(6), 0.0, 1).unwrap();
        assert_eq!(zero, Vector::zeros(h.channel_count()));
        assert!(measure(&h, &Vector::zeros(5), 0.0, 1).is_err());
    }

    #[test]
    fn measurement_noise_averages_out() {
        let topo = GridTopology::chain(2).unwrap();
        let h = build_measurement_tensor(&topo, &ChannelKind::ALL, 3);
        let x = Vector::from(vec![1.0, 0.97, 0.0, -0.04]);
        let clean = measure(&h, &x, 0.0, 0).unwrap();
        let draws = 10_000;
        let mut mean = vec![0.0; h.channel_count()];
        for seed in 0..draws {
            let z = measure(&h, &x, 0.01, seed as u64).unwrap();
            for (m, v) in mean.iter_mut().zip(z.iter()) {
                *m += v / draws as f64;
            }
        }
        let bound = 3.0 * 0.01 / (draws as f64).sqrt();
        for (m, c) in mean.iter().zip(clean.iter()) {
            assert!((m - c).abs() < bound, "{m} vs {c}");
        }
    }

    #[test]
    fn generated_series_shape_and_determinism() {
        let topo = GridTopology::chain(6).unwrap();
        let a = generate_state_series(&topo, 2000, 7, LoadProfile::SinusoidalLoad).unwrap();
        let b = generate_state_series(&topo, 2000, 7, LoadProfile::SinusoidalLoad).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 2000);
        assert!(a.states().iter().all(|s| s.dim() == 12));
        let (lo, hi) = a.magnitude_range();
        assert!(lo >= 0.85 && hi <= 1.15, "magnitudes in [{lo}, {hi}]");
        assert!(generate_state_series(&topo, 0, 7, LoadProfile::RandomWalk).is_err());
    }

    #[test]
    fn random_walk_stays_near_nominal() {
        let topo = GridTopology::chain(4).unwrap();
        let s = generate_state_series(&topo, 3000, 1, LoadProfile::RandomWalk).unwrap();
        let (lo, hi) = s.magnitude_range();
        assert!(lo >= 0.9 - 1e-12 && hi <= 1.1 + 1e-12);
        assert!(s.states().iter().all(|v| v.iter().all(|x| x.is_finite())));
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let topo = GridTopology::chain(3).unwrap();
        let s = generate_state_series(&topo, 25, 4, LoadProfile::RandomWalk).unwrap();
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("t,x_r_1,x_r_2,x_r_3,x_i_1,x_i_2,x_i_3\n"));
        let back = StateSeries::read_csv(buf.as_slice()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn corrupt_csv_reports_line_number() {
        let text = "t,x_r_1,x_r_2,x_i_1,x_i_2\n0,1,1,0,0\n1,1,abc,0,0\n";
        match StateSeries::read_csv(text.as_bytes()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}
