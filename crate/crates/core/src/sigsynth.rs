//! Synthetic multi-antenna IQ recordings: modulated baseband, plane-wave
//! steering, Wiener phase noise and AWGN.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use num_complex::{Complex32, Complex64};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rfssl_numerics::Exec;
use serde::{Deserialize, Serialize};

use crate::datastore::manifest::{Manifest, ManifestEntry};
use crate::datastore::npy::write_npy;
use crate::error::{Error, Result};
use crate::iq::ComplexMatrix;

pub const MAX_ANGLE_DEG: f64 = 70.0;
pub const RRC_ROLLOFF: f64 = 0.35;
/// Pulse-shaping filter span in symbols.
pub const RRC_SPAN: usize = 8;

const STREAM_BASEBAND: u64 = 0;
const STREAM_PHASE: u64 = 1;
const STREAM_NOISE: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modulation {
    #[serde(rename = "BPSK")]
    Bpsk,
    #[serde(rename = "QPSK")]
    Qpsk,
    #[serde(rename = "QAM16")]
    Qam16,
    #[serde(rename = "QAM64")]
    Qam64,
    #[serde(rename = "PAM4")]
    Pam4,
    #[serde(rename = "CW_AM")]
    CwAm,
}

impl Modulation {
    pub const ALL: [Modulation; 6] = [
        Modulation::Bpsk,
        Modulation::Qpsk,
        Modulation::Qam16,
        Modulation::Qam64,
        Modulation::Pam4,
        Modulation::CwAm,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modulation::Bpsk => "BPSK",
            Modulation::Qpsk => "QPSK",
            Modulation::Qam16 => "QAM16",
            Modulation::Qam64 => "QAM64",
            Modulation::Pam4 => "PAM4",
            Modulation::CwAm => "CW_AM",
        }
    }

    /// Unit-power constellation, or `None` for the analog tone.
    pub fn alphabet(self) -> Option<Vec<Complex64>> {
        let c = |re: f64, im: f64| Complex64::new(re, im);
        let square = |levels: &[f64], norm: f64| {
            let mut pts = Vec::with_capacity(levels.len() * levels.len());
            for &i in levels {
                for &q in levels {
                    pts.push(c(i / norm, q / norm));
                }
            }
            pts
        };
        match self {
            Modulation::Bpsk => Some(vec![c(1.0, 0.0), c(-1.0, 0.0)]),
            Modulation::Qpsk => {
                let a = std::f64::consts::FRAC_1_SQRT_2;
                Some(vec![c(a, a), c(-a, a), c(-a, -a), c(a, -a)])
            }
            Modulation::Qam16 => Some(square(&[-3.0, -1.0, 1.0, 3.0], 10f64.sqrt())),
            Modulation::Qam64 => Some(square(&[-7.0, -5.0, -3.0, -1.0, 1.0, 3.0, 5.0, 7.0], 42f64.sqrt())),
            Modulation::Pam4 => {
                let s = 5f64.sqrt();
                Some([-3.0, -1.0, 1.0, 3.0].iter().map(|&v| c(v / s, 0.0)).collect())
            }
            Modulation::CwAm => None,
        }
    }
}

impl fmt::Display for Modulation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modulation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_uppercase();
        let m = match key.as_str() {
            "BPSK" => Modulation::Bpsk,
            "QPSK" => Modulation::Qpsk,
            "QAM16" | "16QAM" => Modulation::Qam16,
            "QAM64" | "64QAM" => Modulation::Qam64,
            "PAM4" | "4PAM" => Modulation::Pam4,
            "CWAM" => Modulation::CwAm,
            _ => return Err(Error::config(format!("unknown modulation {s:?}"))),
        };
        Ok(m)
    }
}

/// Receive array with element positions in wavelengths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub n_rx: usize,
    pub n_tx: usize,
    pub element_positions: Vec<[f64; 3]>,
    pub carrier_hz: f64,
}

impl Default for ArrayGeometry {
    fn default() -> Self {
        ArrayGeometry::square_2x2(0.5)
    }
}

impl ArrayGeometry {
    /// 2×2 grid in the x/y plane with the given spacing, centred on the origin.
    pub fn square_2x2(spacing: f64) -> Self {
        let h = spacing / 2.0;
        ArrayGeometry {
            n_rx: 4,
            n_tx: 1,
            element_positions: vec![[-h, h, 0.0], [h, h, 0.0], [-h, -h, 0.0], [h, -h, 0.0]],
            carrier_hz: 5.88e9,
        }
    }

    /// Uniform line along x.
    pub fn line(n: usize, spacing: f64) -> Self {
        let c = (n as f64 - 1.0) / 2.0;
        ArrayGeometry {
            n_rx: n,
            n_tx: 1,
            element_positions: (0..n).map(|i| [(i as f64 - c) * spacing, 0.0, 0.0]).collect(),
            carrier_hz: 5.88e9,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_rx < 2 {
            return Err(Error::config(format!(
                "array needs at least 2 receive antennas, got {}",
                self.n_rx
            )));
        }
        if self.n_tx < 1 {
            return Err(Error::config("array needs at least one transmit stream"));
        }
        if self.element_positions.len() != self.n_rx {
            return Err(Error::config(format!(
                "{} element positions for {} antennas",
                self.element_positions.len(),
                self.n_rx
            )));
        }
        let pos = &self.element_positions;
        for i in 0..pos.len() {
            if pos[i].iter().any(|v| !v.is_finite()) {
                return Err(Error::config(format!("element {i} position is not finite")));
            }
            for j in 0..i {
                if pos[i] == pos[j] {
                    return Err(Error::config(format!("elements {j} and {i} share a position")));
                }
            }
        }
        if !(self.carrier_hz > 0.0) {
            return Err(Error::config("carrier frequency must be positive"));
        }
        Ok(())
    }
}

/// Unit propagation direction for azimuth (about the vertical axis, from
/// broadside) and elevation (above the horizontal plane).
pub fn direction(azimuth_deg: f64, elevation_deg: f64) -> [f64; 3] {
    let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
    [el.cos() * az.sin(), el.sin(), el.cos() * az.cos()]
}

/// Narrowband plane-wave response `a_i = exp(j·2π·⟨p_i, u⟩)`.
pub fn steering_vector(geometry: &ArrayGeometry, azimuth_deg: f64, elevation_deg: f64) -> Result<Vec<Complex64>> {
    for (name, v) in [("azimuth", azimuth_deg), ("elevation", elevation_deg)] {
        if !(-90.0..=90.0).contains(&v) {
            return Err(Error::config(format!("{name} {v} outside [-90, 90] degrees")));
        }
    }
    let u = direction(azimuth_deg, elevation_deg);
    Ok(geometry
        .element_positions
        .iter()
        .map(|p| Complex64::from_polar(1.0, 2.0 * PI * (p[0] * u[0] + p[1] * u[1] + p[2] * u[2])))
        .collect())
}

/// Root-raised-cosine taps over `span` symbols, scaled so `Σh² = sps`.
pub fn rrc_taps(rolloff: f64, sps: usize, span: usize) -> Vec<f64> {
    let n = span * sps + 1;
    let mid = (n / 2) as f64;
    let b = rolloff;
    let mut h: Vec<f64> = (0..n)
        .map(|i| {
            let t = (i as f64 - mid) / sps as f64;
            if t.abs() < 1e-12 {
                1.0 - b + 4.0 * b / PI
            } else if b > 0.0 && ((4.0 * b * t).abs() - 1.0).abs() < 1e-9 {
                let a = PI / (4.0 * b);
                b / 2f64.sqrt() * ((1.0 + 2.0 / PI) * a.sin() + (1.0 - 2.0 / PI) * a.cos())
            } else {
                let num = (PI * t * (1.0 - b)).sin() + 4.0 * b * t * (PI * t * (1.0 + b)).cos();
                let den = PI * t * (1.0 - (4.0 * b * t).powi(2));
                num / den
            }
        })
        .collect();
    let energy: f64 = h.iter().map(|v| v * v).sum();
    let scale = (sps as f64 / energy).sqrt();
    h.iter_mut().for_each(|v| *v *= scale);
    h
}

/// Unit-power baseband of `n_symbols · samples_per_symbol` samples.
///
/// Digital schemes draw symbols uniformly from their constellation and are
/// root-raised-cosine shaped. `CW_AM` is a tone at a random offset with a
/// sinusoidal envelope.
pub fn gen_baseband(
    modulation: Modulation,
    n_symbols: usize,
    samples_per_symbol: usize,
    seed: u64,
) -> Result<Vec<Complex64>> {
    if n_symbols == 0 {
        return Err(Error::config("n_symbols must be at least 1"));
    }
    if samples_per_symbol == 0 {
        return Err(Error::config("samples_per_symbol must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sps = samples_per_symbol;
    let n = n_symbols * sps;
    let Some(alphabet) = modulation.alphabet() else {
        return Ok(cw_am(n, &mut rng));
    };

    // Extra symbols on both sides keep filter transients out of the output.
    let pad = RRC_SPAN;
    let total = n_symbols + 2 * pad;
    let symbols: Vec<Complex64> = (0..total)
        .map(|_| alphabet[rng.random_range(0..alphabet.len())])
        .collect();
    let h = rrc_taps(RRC_ROLLOFF, sps, RRC_SPAN);
    let half = h.len() / 2;
    let first = pad * sps;
    let mut out = vec![Complex64::new(0.0, 0.0); n];
    for (k, &s) in symbols.iter().enumerate() {
        // Pulse k is centred at k·sps; output index t maps to k·sps = first + t.
        let centre = (k * sps) as isize - first as isize;
        let lo = (centre - half as isize).max(0);
        let hi = (centre + half as isize + 1).min(n as isize);
        for t in lo..hi {
            let tap = h[(t - centre + half as isize) as usize];
            out[t as usize] += s * tap;
        }
    }
    Ok(out)
}

fn cw_am<R: Rng>(n: usize, rng: &mut R) -> Vec<Complex64> {
    const DEPTH: f64 = 0.5;
    let tone = rng.random_range(-0.02..0.02);
    let env = rng.random_range(0.001..0.004);
    let env_phase = rng.random_range(0.0..2.0 * PI);
    let norm = (1.0 + DEPTH * DEPTH / 2.0).sqrt();
    (0..n)
        .map(|t| {
            let t = t as f64;
            let a = (1.0 + DEPTH * (2.0 * PI * env * t + env_phase).cos()) / norm;
            Complex64::from_polar(a, 2.0 * PI * tone * t)
        })
        .collect()
}

/// Parameters of one recording.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub modulation: Modulation,
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    /// Per-antenna SNR; `+inf` disables noise.
    pub snr_db: f64,
    pub samples_per_symbol: usize,
    /// Standard deviation of the per-sample Wiener phase increment.
    pub phase_noise_std_rad: f64,
    pub recording_len: usize,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("azimuth", self.azimuth_deg), ("elevation", self.elevation_deg)] {
            if !(v.abs() <= MAX_ANGLE_DEG) {
                return Err(Error::config(format!("{name} {v} outside ±{MAX_ANGLE_DEG} degrees")));
            }
        }
        if self.snr_db.is_nan() || self.snr_db == f64::NEG_INFINITY {
            return Err(Error::config(format!("snr_db {} is not usable", self.snr_db)));
        }
        if self.samples_per_symbol == 0 {
            return Err(Error::config("samples_per_symbol must be at least 1"));
        }
        if !(self.phase_noise_std_rad >= 0.0 && self.phase_noise_std_rad.is_finite()) {
            return Err(Error::config("phase_noise_std_rad must be finite and >= 0"));
        }
        if self.recording_len < crate::FRAME_LEN {
            return Err(Error::config(format!(
                "recording_len {} shorter than one frame ({})",
                self.recording_len,
                crate::FRAME_LEN
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordingMeta {
    pub azimuth_deg: f64,
    pub elevation_deg: f64,
    pub modulation: Modulation,
    pub snr_db: f64,
    pub seed: u64,
}

/// Long capture: `n_rx × recording_len` complex samples.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub iq: ComplexMatrix,
    pub meta: RecordingMeta,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `iq = a(θ,φ) · s(t) · e^{jψ(t)} + n(t)`.
///
/// Baseband, phase noise and thermal noise draw from independent streams of
/// the seed, so the noiseless part is identical across SNR settings.
pub fn synthesize_recording(config: &SynthConfig, geometry: &ArrayGeometry) -> Result<Recording> {
    config.validate()?;
    geometry.validate()?;
    let len = config.recording_len;
    let sps = config.samples_per_symbol;
    let n_symbols = len.div_ceil(sps);
    let base_seed = stream_rng(config.seed, STREAM_BASEBAND).random::<u64>();
    let mut s = gen_baseband(config.modulation, n_symbols, sps, base_seed)?;
    s.truncate(len);

    if config.phase_noise_std_rad > 0.0 {
        let mut rng = stream_rng(config.seed, STREAM_PHASE);
        let step = Normal::new(0.0, config.phase_noise_std_rad).map_err(|e| Error::config(e.to_string()))?;
        let mut psi = 0.0f64;
        for v in s.iter_mut() {
            *v *= Complex64::from_polar(1.0, psi);
            psi += step.sample(&mut rng);
        }
    }

    let a = steering_vector(geometry, config.azimuth_deg, config.elevation_deg)?;
    let noise = if config.snr_db.is_finite() {
        let sigma = (10f64.powf(-config.snr_db / 10.0) / 2.0).sqrt();
        Some(Normal::new(0.0, sigma).map_err(|e| Error::config(e.to_string()))?)
    } else {
        None
    };
    let mut rng = stream_rng(config.seed, STREAM_NOISE);
    let mut data = Vec::with_capacity(geometry.n_rx * len);
    for ai in &a {
        for &st in &s {
            let mut x = ai * st;
            if let Some(d) = &noise {
                x += Complex64::new(d.sample(&mut rng), d.sample(&mut rng));
            }
            data.push(Complex32::new(x.re as f32, x.im as f32));
        }
    }
    Ok(Recording {
        iq: ComplexMatrix::new(geometry.n_rx, len, data)?,
        meta: RecordingMeta {
            azimuth_deg: config.azimuth_deg,
            elevation_deg: config.elevation_deg,
            modulation: config.modulation,
            snr_db: config.snr_db,
            seed: config.seed,
        },
    })
}

/// Balanced angle × modulation grid of recordings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetGrid {
    pub azimuths_deg: Vec<f64>,
    pub elevations_deg: Vec<f64>,
    pub modulations: Vec<Modulation>,
    /// Each recording draws its SNR uniformly from this closed range.
    pub snr_db: [f64; 2],
    pub samples_per_symbol: usize,
    pub phase_noise_std_rad: f64,
    pub recording_len: usize,
    pub geometry: ArrayGeometry,
    pub seed: u64,
}

impl DatasetGrid {
    /// Evenly spaced angles across ±70° with `n` points per axis.
    pub fn even_angles(n: usize) -> Vec<f64> {
        if n == 1 {
            return vec![0.0];
        }
        (0..n)
            .map(|i| -MAX_ANGLE_DEG + 2.0 * MAX_ANGLE_DEG * i as f64 / (n - 1) as f64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.azimuths_deg.is_empty() || self.elevations_deg.is_empty() || self.modulations.is_empty() {
            return Err(Error::config("dataset grid has an empty axis"));
        }
        let [lo, hi] = self.snr_db;
        if lo.is_nan() || hi.is_nan() || lo > hi {
            return Err(Error::config(format!("bad snr range [{lo}, {hi}]")));
        }
        self.geometry.validate()
    }

    pub fn num_cells(&self) -> usize {
        self.azimuths_deg.len() * self.elevations_deg.len() * self.modulations.len()
    }

    /// One config per recording, ordered by (azimuth, elevation, modulation,
    /// repetition). Seeds derive from the grid seed and the recording index.
    pub fn configs(&self, per_cell: usize) -> Result<Vec<SynthConfig>> {
        self.validate()?;
        if per_cell == 0 {
            return Err(Error::config("per_cell must be at least 1"));
        }
        let mut out = Vec::with_capacity(self.num_cells() * per_cell);
        for &az in &self.azimuths_deg {
            for &el in &self.elevations_deg {
                for &m in &self.modulations {
                    for _ in 0..per_cell {
                        let seed = derive_seed(self.seed, out.len() as u64);
                        let [lo, hi] = self.snr_db;
                        let snr = if lo == hi {
                            lo
                        } else {
                            let u: f64 = ChaCha8Rng::seed_from_u64(seed ^ 0x5a5a_5a5a).random();
                            lo + (hi - lo) * u
                        };
                        let cfg = SynthConfig {
                            modulation: m,
                            azimuth_deg: az,
                            elevation_deg: el,
                            snr_db: snr,
                            samples_per_symbol: self.samples_per_symbol,
                            phase_noise_std_rad: self.phase_noise_std_rad,
                            recording_len: self.recording_len,
                            seed,
                        };
                        cfg.validate()?;
                        out.push(cfg);
                    }
                }
            }
        }
        Ok(out)
    }
}

/// SplitMix64 finalizer over `base + index`, truncated to 63 bits so every
/// derived seed fits a TOML integer.
pub fn derive_seed(base: u64, index: u64) -> u64 {
    let mut z = base.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    (z ^ (z >> 31)) >> 1
}

/// All recordings of the grid held in memory, in grid order.
pub fn synthesize_recordings(grid: &DatasetGrid, per_cell: usize, exec: Exec) -> Result<Vec<Recording>> {
    let configs = grid.configs(per_cell)?;
    exec.map(configs.len(), |i| synthesize_recording(&configs[i], &grid.geometry))
        .into_iter()
        .collect()
}

/// File name of recording `id` inside a dataset directory.
pub fn recording_file_name(id: usize) -> String {
    format!("rec_{id:05}.npy")
}

/// Writes every recording of the grid as `.npy` plus `manifest.csv` into
/// `out_dir` and returns the manifest.
pub fn synthesize_dataset(grid: &DatasetGrid, per_cell: usize, out_dir: &Path, exec: Exec) -> Result<Manifest> {
    let configs = grid.configs(per_cell)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let entries: Vec<Result<ManifestEntry>> = exec.map(configs.len(), |i| {
        let rec = synthesize_recording(&configs[i], &grid.geometry)?;
        let file = recording_file_name(i);
        write_npy(&out_dir.join(&file), &rec.iq)?;
        Ok(ManifestEntry::new(i, file, &rec.meta))
    });
    let manifest = Manifest {
        entries: entries.into_iter().collect::<Result<_>>()?,
    };
    manifest.write(&out_dir.join(Manifest::FILE_NAME))?;
    Ok(manifest)
}

/// Classical azimuth/elevation estimate from inter-antenna phase differences
/// of a planar array. Uses only element pairs at most half a wavelength apart
/// so phases do not wrap.
pub fn phase_difference_aoa(iq: &ComplexMatrix, geometry: &ArrayGeometry) -> Result<(f64, f64)> {
    if iq.rows() != geometry.n_rx {
        return Err(Error::data(format!(
            "{} rows for {} antennas",
            iq.rows(),
            geometry.n_rx
        )));
    }
    let pos = &geometry.element_positions;
    if pos.iter().any(|p| (p[2] - pos[0][2]).abs() > 1e-12) {
        return Err(Error::config("phase-difference estimate needs a planar array"));
    }
    // Normal equations for (ux, uy): Σ d dᵀ u = Σ d·φ/2π.
    let (mut sxx, mut sxy, mut syy, mut bx, mut by) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..pos.len() {
        for j in (i + 1)..pos.len() {
            let d = [pos[i][0] - pos[j][0], pos[i][1] - pos[j][1]];
            if (d[0] * d[0] + d[1] * d[1]).sqrt() > 0.5 + 1e-9 {
                continue;
            }
            let r: Complex64 = iq
                .row(i)
                .iter()
                .zip(iq.row(j))
                .map(|(a, b)| {
                    let (a, b) = (
                        Complex64::new(a.re as f64, a.im as f64),
                        Complex64::new(b.re as f64, b.im as f64),
                    );
                    a * b.conj()
                })
                .sum();
            let phase = r.arg() / (2.0 * PI);
            sxx += d[0] * d[0];
            sxy += d[0] * d[1];
            syy += d[1] * d[1];
            bx += d[0] * phase;
            by += d[1] * phase;
        }
    }
    let det = sxx * syy - sxy * sxy;
    if det.abs() < 1e-12 {
        return Err(Error::config("array pairs do not span both axes"));
    }
    let ux = (syy * bx - sxy * by) / det;
    let uy = (sxx * by - sxy * bx) / det;
    let uz = (1.0 - ux * ux - uy * uy).max(0.0).sqrt();
    let el = uy.clamp(-1.0, 1.0).asin();
    let az = ux.atan2(uz);
    Ok((az.to_degrees(), el.to_degrees()))
}
