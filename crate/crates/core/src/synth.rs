//! Seeded synthetic dataset generator.
//!
//! Encodes complementary blind spots: the radar trace carries the deep-defect
//! signature (class 3) clearly but the shallow one (class 2) only at reduced
//! complementarity, while the thermal patch does the reverse. Every class
//! makes the identical sequence of rng draws and merely scales the defect
//! terms, so at complementarity 1 the blinded class pair is equal in law —
//! bitwise equal given the same stream.

use crate::error::{Error, Result};
use crate::rng::{stream_id, Domain, RngStream};
use crate::tensor::{Element, Tensor};
use serde::{Deserialize, Serialize};

pub const GPR_LEN: usize = 512;
pub const IRT_H: usize = 112;
pub const IRT_W: usize = 112;
pub const IRT_C: usize = 3;
pub const GENERATOR_VERSION: &str = "synth-v1";

/// Class priors from the survey corpus.
pub const DIST_DEFAULT: [f64; 3] = [0.77, 0.17, 0.06];
/// Extreme-imbalance preset.
pub const DIST_EXTREME: [f64; 3] = [0.895, 0.087, 0.018];
/// Moderate-imbalance preset.
pub const DIST_MODERATE: [f64; 3] = [0.56, 0.33, 0.11];

/// Two fixed affine recolorings turn the thermal map into channels 1 and 2.
const RECOLOR: [(f32, f32); 2] = [(0.85, 0.10), (1.15, -0.075)];

/// Critical coefficient for a two-sample Kolmogorov–Smirnov test at α=0.01.
pub const KS_C_ALPHA_001: f64 = 1.628;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub n_samples: usize,
    pub class_fractions: [f64; 3],
    pub seed: u64,
    pub gpr_noise_sigma: f64,
    pub irt_noise_sigma: f64,
    /// Strength of each modality's blind spot in [0, 1]; at 1 the blinded
    /// defect contributes nothing to its blind modality.
    pub complementarity: f64,
    /// Amplitude range of the shallow-defect radar perturbation, before the
    /// (1 − complementarity) scale.
    pub shallow_amp: [f64; 2],
    /// Deep-echo amplitude as a fraction of the rebar echo.
    pub deep_amp_ratio: [f64; 2],
    /// Peak temperature rise of the shallow-defect hot spot.
    pub hotspot_peak: [f64; 2],
    /// Peak of the deep-defect diffuse thermal anomaly, before the
    /// (1 − complementarity) scale.
    pub diffuse_peak: [f64; 2],
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            n_samples: 1000,
            class_fractions: DIST_DEFAULT,
            seed: 0,
            gpr_noise_sigma: 0.1,
            irt_noise_sigma: 0.02,
            complementarity: 0.8,
            shallow_amp: [0.25, 0.45],
            deep_amp_ratio: [0.7, 0.9],
            hotspot_peak: [0.2, 0.3],
            diffuse_peak: [0.04, 0.06],
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.class_fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "class fractions must sum to 1, got {sum}"
            )));
        }
        if self.class_fractions.iter().any(|&f| f <= 0.0) {
            return Err(Error::Config("every class fraction must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.complementarity) {
            return Err(Error::Config(format!(
                "complementarity must be in [0, 1], got {}",
                self.complementarity
            )));
        }
        if self.gpr_noise_sigma < 0.0 || self.irt_noise_sigma < 0.0 {
            return Err(Error::Config("noise sigmas must be nonnegative".into()));
        }
        for (name, r) in [
            ("shallow_amp", self.shallow_amp),
            ("deep_amp_ratio", self.deep_amp_ratio),
            ("hotspot_peak", self.hotspot_peak),
            ("diffuse_peak", self.diffuse_peak),
        ] {
            if !(r[0].is_finite() && r[1].is_finite()) || r[0] < 0.0 || r[1] < r[0] {
                return Err(Error::Config(format!(
                    "{name} range [{}, {}] is not a valid nonnegative interval",
                    r[0], r[1]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub n: usize,
    pub gpr_len: usize,
    pub irt_h: usize,
    pub irt_w: usize,
    pub irt_c: usize,
    pub class_counts: [usize; 3],
    pub seed: u64,
    pub generator: String,
}

/// In-memory dataset. Radar traces are stored row-major `[n][512]`; thermal
/// patches channel-first `[n][3][112][112]` (the on-disk layout is
/// channel-last and converted on read/write).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub gpr: Vec<f32>,
    pub irt: Vec<f32>,
    pub labels: Vec<u8>,
    pub manifest: Manifest,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    /// Internal-consistency check used after deserialization.
    pub fn check(&self) -> Result<()> {
        let n = self.labels.len();
        if self.manifest.n != n {
            return Err(Error::Input(format!(
                "manifest says n={}, label block holds {n}",
                self.manifest.n
            )));
        }
        if self.gpr.len() != n * GPR_LEN || self.irt.len() != n * IRT_C * IRT_H * IRT_W {
            return Err(Error::Input("modality block sizes disagree with n".into()));
        }
        let mut counts = [0usize; 3];
        for &l in &self.labels {
            if !(1..=3).contains(&l) {
                return Err(Error::Label(l as i64));
            }
            counts[l as usize - 1] += 1;
        }
        if counts != self.manifest.class_counts {
            return Err(Error::Input(format!(
                "manifest class counts {:?} disagree with labels {:?}",
                self.manifest.class_counts, counts
            )));
        }
        Ok(())
    }

    pub fn gpr_batch<E: Element>(&self, idx: &[usize]) -> Result<Tensor<E>> {
        let mut data = Vec::with_capacity(idx.len() * GPR_LEN);
        for &i in idx {
            if i >= self.n() {
                return Err(Error::Input(format!("sample index {i} out of range")));
            }
            data.extend(
                self.gpr[i * GPR_LEN..(i + 1) * GPR_LEN]
                    .iter()
                    .map(|&v| E::from_real(v as f64)),
            );
        }
        Tensor::new(&[idx.len(), GPR_LEN], data)
    }

    pub fn irt_batch<E: Element>(&self, idx: &[usize]) -> Result<Tensor<E>> {
        let w = IRT_C * IRT_H * IRT_W;
        let mut data = Vec::with_capacity(idx.len() * w);
        for &i in idx {
            if i >= self.n() {
                return Err(Error::Input(format!("sample index {i} out of range")));
            }
            data.extend(self.irt[i * w..(i + 1) * w].iter().map(|&v| E::from_real(v as f64)));
        }
        Tensor::new(&[idx.len(), IRT_C, IRT_H, IRT_W], data)
    }

    pub fn labels_at(&self, idx: &[usize]) -> Vec<u8> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

fn check_label(label: u8) -> Result<()> {
    if (1..=3).contains(&label) {
        Ok(())
    } else {
        Err(Error::Label(label as i64))
    }
}

/// Ricker ("Mexican hat") wavelet at normalized offset s.
fn ricker(s: f64) -> f64 {
    (1.0 - 2.0 * s * s) * (-s * s).exp()
}

/// One radar trace: damped oscillation, rebar echo at index 300, class-3
/// deep echo in 380–420, class-2 shallow perturbation near 60 scaled by
/// (1 − complementarity); normalized to zero mean, unit variance.
///
/// Every label draws the same variates in the same order; labels only change
/// the scale applied to the defect terms.
pub fn generate_gpr(label: u8, cfg: &GeneratorConfig, rng: &mut RngStream) -> Result<Vec<f32>> {
    check_label(label)?;
    let osc_amp = rng.uniform_in(0.8, 1.2);
    let tau = rng.uniform_in(60.0, 120.0);
    let omega = rng.uniform_in(0.15, 0.35);
    let phase = rng.uniform_in(0.0, std::f64::consts::TAU);
    let echo_amp = rng.uniform_in(0.8, 1.2);
    let echo_width = rng.uniform_in(8.0, 14.0);
    let deep_center = rng.uniform_in(380.0, 420.0);
    let deep_ratio = rng.uniform_in(cfg.deep_amp_ratio[0], cfg.deep_amp_ratio[1]);
    let deep_width = rng.uniform_in(8.0, 14.0);
    let shallow_center = rng.uniform_in(52.0, 68.0);
    let shallow_amp = rng.uniform_in(cfg.shallow_amp[0], cfg.shallow_amp[1]);
    let shallow_width = rng.uniform_in(6.0, 10.0);

    let deep_scale = if label == 3 { echo_amp * deep_ratio } else { 0.0 };
    let shallow_scale = if label == 2 {
        (1.0 - cfg.complementarity) * shallow_amp
    } else {
        0.0
    };

    let mut x = vec![0.0f64; GPR_LEN];
    for (t, v) in x.iter_mut().enumerate() {
        let tf = t as f64;
        *v = osc_amp * (-tf / tau).exp() * (omega * tf + phase).sin()
            + echo_amp * ricker((tf - 300.0) / echo_width)
            + deep_scale * ricker((tf - deep_center) / deep_width)
            + shallow_scale * ricker((tf - shallow_center) / shallow_width)
            + cfg.gpr_noise_sigma * rng.normal();
    }
    let n = GPR_LEN as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = var.sqrt().max(1e-12);
    Ok(x.into_iter().map(|v| ((v - mean) / sd) as f32).collect())
}

/// One thermal patch, channel-first `[3][112][112]`: smooth gradient in
/// [0.3, 0.7], class-2 Gaussian hot spot, class-3 diffuse anomaly scaled by
/// (1 − complementarity); noisy, clipped to [0, 1], recolored into three
/// channels. Same fixed draw path for every label.
pub fn generate_irt(label: u8, cfg: &GeneratorConfig, rng: &mut RngStream) -> Result<Vec<f32>> {
    check_label(label)?;
    let base = rng.uniform_in(-0.03, 0.03);
    let gx = rng.uniform_in(-0.06, 0.06);
    let gy = rng.uniform_in(-0.06, 0.06);
    let cos_amp = rng.uniform_in(0.01, 0.025);
    let fx = rng.uniform_in(0.5, 2.0);
    let fy = rng.uniform_in(0.5, 2.0);
    let phx = rng.uniform_in(0.0, std::f64::consts::TAU);
    let phy = rng.uniform_in(0.0, std::f64::consts::TAU);
    let hot_cx = rng.uniform_in(0.15, 0.85) * (IRT_W - 1) as f64;
    let hot_cy = rng.uniform_in(0.15, 0.85) * (IRT_H - 1) as f64;
    let hot_r = rng.uniform_in(8.0, 20.0);
    let hot_peak = rng.uniform_in(cfg.hotspot_peak[0], cfg.hotspot_peak[1]);
    let dif_cx = rng.uniform_in(0.25, 0.75) * (IRT_W - 1) as f64;
    let dif_cy = rng.uniform_in(0.25, 0.75) * (IRT_H - 1) as f64;
    let dif_r = rng.uniform_in(30.0, 50.0);
    let dif_peak = rng.uniform_in(cfg.diffuse_peak[0], cfg.diffuse_peak[1]);

    let hot_scale = if label == 2 { hot_peak } else { 0.0 };
    let dif_scale = if label == 3 {
        (1.0 - cfg.complementarity) * dif_peak
    } else {
        0.0
    };

    let mut thermal = vec![0.0f32; IRT_H * IRT_W];
    for y in 0..IRT_H {
        let v = y as f64 / (IRT_H - 1) as f64;
        for x in 0..IRT_W {
            let u = x as f64 / (IRT_W - 1) as f64;
            // fixed structural component: keeps the expected temperature
            // surface non-flat so per-pixel statistics carry information
            let template = 0.5
                + 0.07 * (v - 0.5)
                + 0.045
                    * (std::f64::consts::TAU * 1.3 * u + 0.7).cos()
                    * (std::f64::consts::TAU * 0.9 * v + 1.9).cos();
            let plane = template + base + gx * (u - 0.5) + gy * (v - 0.5);
            let wave = cos_amp
                * (std::f64::consts::TAU * fx * u + phx).cos()
                * (std::f64::consts::TAU * fy * v + phy).cos();
            let dh2 = (x as f64 - hot_cx).powi(2) + (y as f64 - hot_cy).powi(2);
            let dd2 = (x as f64 - dif_cx).powi(2) + (y as f64 - dif_cy).powi(2);
            let t = plane
                + wave
                + hot_scale * (-dh2 / (2.0 * hot_r * hot_r)).exp()
                + dif_scale * (-dd2 / (2.0 * dif_r * dif_r)).exp()
                + cfg.irt_noise_sigma * rng.normal();
            thermal[y * IRT_W + x] = t.clamp(0.0, 1.0) as f32;
        }
    }
    let mut out = Vec::with_capacity(IRT_C * IRT_H * IRT_W);
    out.extend_from_slice(&thermal);
    for (a, b) in RECOLOR {
        out.extend(thermal.iter().map(|&t| (a * t + b).clamp(0.0, 1.0)));
    }
    Ok(out)
}

/// Exact class counts by largest-remainder rounding; each count differs from
/// n·fraction by less than 1, ties broken toward the lower class.
pub fn largest_remainder(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let mut counts = [0usize; 3];
    let mut rema: Vec<(usize, f64)> = Vec::with_capacity(3);
    let mut assigned = 0usize;
    for c in 0..3 {
        let target = n as f64 * fractions[c];
        counts[c] = target.floor() as usize;
        assigned += counts[c];
        rema.push((c, target - target.floor()));
    }
    rema.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    for i in 0..n - assigned {
        counts[rema[i % 3].0] += 1;
    }
    counts
}

/// Generate the full paired dataset: exact class counts, deterministic label
/// shuffle, one shared rng stream per sample feeding both modalities.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<Dataset> {
    cfg.validate()?;
    let n = cfg.n_samples;
    if n < 3 {
        return Err(Error::Input(format!(
            "dataset size must be at least 3 to cover every class, got {n}"
        )));
    }
    if n > u32::MAX as usize {
        return Err(Error::Input(format!("dataset size {n} too large")));
    }
    let counts = largest_remainder(n, &cfg.class_fractions);
    let mut labels = Vec::with_capacity(n);
    for (c, &k) in counts.iter().enumerate() {
        labels.extend(std::iter::repeat(c as u8 + 1).take(k));
    }
    let mut shuffle = RngStream::new(cfg.seed, stream_id(Domain::Data, 0, 0));
    for i in (1..n).rev() {
        labels.swap(i, shuffle.below(i as u32 + 1) as usize);
    }

    let mut gpr = Vec::with_capacity(n * GPR_LEN);
    let mut irt = Vec::with_capacity(n * IRT_C * IRT_H * IRT_W);
    for (i, &label) in labels.iter().enumerate() {
        let mut s = RngStream::new(cfg.seed, stream_id(Domain::Data, i as u32, 1));
        gpr.extend(generate_gpr(label, cfg, &mut s)?);
        irt.extend(generate_irt(label, cfg, &mut s)?);
    }
    Ok(Dataset {
        gpr,
        irt,
        labels,
        manifest: Manifest {
            version: 1,
            n,
            gpr_len: GPR_LEN,
            irt_h: IRT_H,
            irt_w: IRT_W,
            irt_c: IRT_C,
            class_counts: counts,
            seed: cfg.seed,
            generator: GENERATOR_VERSION.into(),
        },
    })
}

/// Two-sample Kolmogorov–Smirnov statistic: max distance between the
/// empirical CDFs.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    assert!(!a.is_empty() && !b.is_empty());
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let v = a[i].min(b[j]);
        while i < a.len() && a[i] <= v {
            i += 1;
        }
        while j < b.len() && b[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Rejection threshold c(α)·√((n+m)/(n·m)) for the two-sample KS test.
pub fn ks_threshold(n: usize, m: usize, c_alpha: f64) -> f64 {
    c_alpha * ((n + m) as f64 / (n as f64 * m as f64)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg_with(c: f64) -> GeneratorConfig {
        GeneratorConfig {
            complementarity: c,
            ..GeneratorConfig::default()
        }
    }

    fn stream(i: u32, b: u16) -> RngStream {
        RngStream::new(99, stream_id(Domain::Data, i, b))
    }

    #[test]
    fn gpr_normalized_finite() {
        let cfg = GeneratorConfig::default();
        for label in 1..=3u8 {
            for i in 0..20 {
                let x = generate_gpr(label, &cfg, &mut stream(i, label as u16)).unwrap();
                assert_eq!(x.len(), GPR_LEN);
                assert!(x.iter().all(|v| v.is_finite()));
                let mean = x.iter().map(|&v| v as f64).sum::<f64>() / GPR_LEN as f64;
                let var = x.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>()
                    / GPR_LEN as f64;
                assert!(mean.abs() < 1e-6, "mean {mean}");
                assert!((var - 1.0).abs() < 1e-6, "var {var}");
            }
        }
    }

    #[test]
    fn irt_in_unit_interval_with_recolored_channels() {
        let cfg = GeneratorConfig::default();
        for label in 1..=3u8 {
            let p = generate_irt(label, &cfg, &mut stream(label as u32, 9)).unwrap();
            assert_eq!(p.len(), IRT_C * IRT_H * IRT_W);
            assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
            let hw = IRT_H * IRT_W;
            for (ch, (a, b)) in RECOLOR.iter().enumerate() {
                for pos in (0..hw).step_by(997) {
                    let expect = (a * p[pos] + b).clamp(0.0, 1.0);
                    assert_eq!(p[(ch + 1) * hw + pos], expect);
                }
            }
        }
    }

    #[test]
    fn full_complementarity_blind_pairs_are_bitwise_equal() {
        let cfg = cfg_with(1.0);
        let g1 = generate_gpr(1, &cfg, &mut stream(5, 0)).unwrap();
        let g2 = generate_gpr(2, &cfg, &mut stream(5, 0)).unwrap();
        assert_eq!(g1, g2);
        let g3 = generate_gpr(3, &cfg, &mut stream(5, 0)).unwrap();
        assert_ne!(g1, g3);

        let i1 = generate_irt(1, &cfg, &mut stream(6, 0)).unwrap();
        let i3 = generate_irt(3, &cfg, &mut stream(6, 0)).unwrap();
        assert_eq!(i1, i3);
        let i2 = generate_irt(2, &cfg, &mut stream(6, 0)).unwrap();
        assert_ne!(i1, i2);

        let part = cfg_with(0.5);
        assert_ne!(
            generate_gpr(1, &part, &mut stream(5, 0)).unwrap(),
            generate_gpr(2, &part, &mut stream(5, 0)).unwrap()
        );
        assert_ne!(
            generate_irt(1, &part, &mut stream(6, 0)).unwrap(),
            generate_irt(3, &part, &mut stream(6, 0)).unwrap()
        );
    }

    #[test]
    fn gpr_blind_pair_passes_ks_at_full_complementarity() {
        let cfg = cfg_with(1.0);
        let draws = 2000;
        let mut m1 = vec![0.0f64; GPR_LEN];
        let mut m2 = vec![0.0f64; GPR_LEN];
        for i in 0..draws {
            let a = generate_gpr(1, &cfg, &mut stream(i, 1)).unwrap();
            let b = generate_gpr(2, &cfg, &mut stream(i, 2)).unwrap();
            for t in 0..GPR_LEN {
                m1[t] += a[t] as f64 / draws as f64;
                m2[t] += b[t] as f64 / draws as f64;
            }
        }
        let d = ks_statistic(&m1, &m2);
        let thresh = ks_threshold(GPR_LEN, GPR_LEN, KS_C_ALPHA_001);
        assert!(d < thresh, "KS {d} ≥ {thresh}");
    }

    #[test]
    fn irt_blind_pair_passes_ks_at_full_complementarity() {
        let cfg = cfg_with(1.0);
        let draws = 2000;
        let hw = IRT_H * IRT_W;
        let mut m1 = vec![0.0f64; hw];
        let mut m3 = vec![0.0f64; hw];
        for i in 0..draws {
            let a = generate_irt(1, &cfg, &mut stream(i, 3)).unwrap();
            let b = generate_irt(3, &cfg, &mut stream(i, 4)).unwrap();
            for p in 0..hw {
                m1[p] += a[p] as f64 / draws as f64;
                m3[p] += b[p] as f64 / draws as f64;
            }
        }
        let d = ks_statistic(&m1, &m3);
        let thresh = ks_threshold(hw, hw, KS_C_ALPHA_001);
        assert!(d < thresh, "KS {d} ≥ {thresh}");
    }

    /// (mean_a − mean_b) in units of the pooled standard error.
    fn margin(a: &[f64], b: &[f64]) -> f64 {
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let va = a.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / (n - 1.0);
        let vb = b.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / (n - 1.0);
        (ma - mb) / ((va / n + vb / n).sqrt())
    }

    #[test]
    fn deep_echo_separates_class3_in_gpr() {
        let cfg = GeneratorConfig::default();
        let stat = |label: u8, i: u32| {
            let x = generate_gpr(label, &cfg, &mut stream(i, 5)).unwrap();
            x[380..=420].iter().map(|&v| v.abs() as f64).sum::<f64>() / 41.0
        };
        let s3: Vec<f64> = (0..500).map(|i| stat(3, i)).collect();
        let s1: Vec<f64> = (500..1000).map(|i| stat(1, i)).collect();
        let m = margin(&s3, &s1);
        assert!(m >= 3.0, "deep-echo margin {m} < 3 standard errors");
    }

    #[test]
    fn hotspot_separates_class2_in_irt() {
        let cfg = GeneratorConfig::default();
        let stat = |label: u8, i: u32| {
            let p = generate_irt(label, &cfg, &mut stream(i, 6)).unwrap();
            p[..IRT_H * IRT_W].iter().cloned().fold(f32::MIN, f32::max) as f64
        };
        let s2: Vec<f64> = (0..500).map(|i| stat(2, i)).collect();
        let s1: Vec<f64> = (500..1000).map(|i| stat(1, i)).collect();
        let m = margin(&s2, &s1);
        assert!(m >= 3.0, "hot-spot margin {m} < 3 standard errors");
    }

    #[test]
    fn shallow_defect_visible_in_gpr_only_below_full_complementarity() {
        let stat = |cfg: &GeneratorConfig, label: u8, i: u32| {
            let x = generate_gpr(label, cfg, &mut stream(i, 7)).unwrap();
            x[52..=68].iter().map(|&v| v.abs() as f64).sum::<f64>() / 17.0
        };
        for (c, visible) in [(0.0, true), (1.0, false)] {
            let cfg = cfg_with(c);
            let s2: Vec<f64> = (0..500).map(|i| stat(&cfg, 2, i)).collect();
            let s1: Vec<f64> = (500..1000).map(|i| stat(&cfg, 1, i)).collect();
            let m = margin(&s2, &s1);
            if visible {
                assert!(m >= 3.0, "shallow defect should stand out at c=0, margin {m}");
            } else {
                assert!(m.abs() < 3.0, "shallow defect must vanish at c=1, margin {m}");
            }
        }
    }

    #[test]
    fn largest_remainder_counts() {
        assert_eq!(largest_remainder(1000, &DIST_DEFAULT), [770, 170, 60]);
        assert_eq!(
            largest_remainder(3, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
            [1, 1, 1]
        );
        assert_eq!(largest_remainder(6000, &DIST_EXTREME), [5370, 522, 108]);
        for (n, f) in [
            (7usize, [0.5, 0.3, 0.2]),
            (11, [0.77, 0.17, 0.06]),
            (97, [0.895, 0.087, 0.018]),
        ] {
            let c = largest_remainder(n, &f);
            assert_eq!(c.iter().sum::<usize>(), n);
            for k in 0..3 {
                assert!((c[k] as f64 - n as f64 * f[k]).abs() < 1.0);
            }
        }
    }

    #[test]
    fn dataset_is_deterministic_with_exact_counts() {
        let cfg = GeneratorConfig {
            n_samples: 40,
            seed: 7,
            ..GeneratorConfig::default()
        };
        let a = generate_dataset(&cfg).unwrap();
        let b = generate_dataset(&cfg).unwrap();
        assert_eq!(a, b);
        a.check().unwrap();
        assert_eq!(a.manifest.class_counts, largest_remainder(40, &DIST_DEFAULT));
        assert_eq!(a.manifest.generator, "synth-v1");
        // shuffled: the class-1 block must not sit contiguously at the front
        let front: Vec<u8> = a.labels[..31].to_vec();
        assert!(front.iter().any(|&l| l != 1));
        let other = generate_dataset(&GeneratorConfig { seed: 8, ..cfg }).unwrap();
        assert_ne!(a.labels, other.labels);
    }

    #[test]
    fn dataset_batches_slice_samples() {
        let cfg = GeneratorConfig {
            n_samples: 5,
            class_fractions: [0.4, 0.4, 0.2],
            ..GeneratorConfig::default()
        };
        let ds = generate_dataset(&cfg).unwrap();
        let g: Tensor<f32> = ds.gpr_batch(&[3, 0]).unwrap();
        assert_eq!(g.shape(), &[2, GPR_LEN]);
        assert_eq!(g.data()[..GPR_LEN], ds.gpr[3 * GPR_LEN..4 * GPR_LEN]);
        let i: Tensor<f32> = ds.irt_batch(&[4]).unwrap();
        assert_eq!(i.shape(), &[1, IRT_C, IRT_H, IRT_W]);
        assert_eq!(ds.labels_at(&[3, 0]), vec![ds.labels[3], ds.labels[0]]);
        assert!(ds.gpr_batch::<f32>(&[5]).is_err());
    }

    #[test]
    fn config_validation_rejects_bad_inputs() {
        let ok = GeneratorConfig::default();
        ok.validate().unwrap();
        let mut bad = ok.clone();
        bad.class_fractions = [0.5, 0.5, 0.1];
        assert!(bad.validate().is_err());
        bad = ok.clone();
        bad.class_fractions = [1.0, 0.0, 0.0];
        assert!(bad.validate().is_err());
        bad = ok.clone();
        bad.complementarity = 1.5;
        assert!(bad.validate().is_err());
        bad = ok.clone();
        bad.shallow_amp = [0.5, 0.2];
        assert!(bad.validate().is_err());
        bad = ok.clone();
        bad.n_samples = 2;
        assert!(generate_dataset(&bad).is_err());
        assert!(generate_gpr(0, &ok, &mut stream(0, 0)).is_err());
        assert!(generate_irt(4, &ok, &mut stream(0, 0)).is_err());
    }

    #[test]
    fn ks_statistic_extremes() {
        let a = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(ks_statistic(&a, &a), 0.0);
        let b = [10.0, 11.0, 12.0];
        assert_eq!(ks_statistic(&a, &b), 1.0);
        let c = [1.5, 2.5];
        let d = ks_statistic(&a, &c);
        assert!(d > 0.0 && d < 1.0);
    }
}
