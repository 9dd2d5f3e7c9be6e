//! Synthetic 12-lead exams built from Gaussian-bump beat templates, plus the
//! R-peak and SDNN estimators used to measure them.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::adjudicator::{ExamMeasures, SourceFlags};
use crate::classes::{Abnormality, N_CLASSES, PREVALENCE_TEST, PREVALENCE_TRAIN};
use crate::data::{write_json, write_manifest, JsonlWriter, ManifestEntry, Signal, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::seeds;
use crate::tensor::Tensor;

pub const SAMPLE_RATE_HZ: u32 = 400;
pub const DURATION_S: f64 = 10.24;
pub const EXAM_SAMPLES: usize = 4096;
pub const LEADS: usize = 12;
/// Index of the lead used for beat detection (lead II).
pub const DETECTION_LEAD: usize = 1;
pub const REFRACTORY_S: f64 = 0.2;

/// Mixing gains from the canonical waveform to I, II, III, aVR, aVL, aVF,
/// V1–V6.
pub const LEAD_GAINS: [f64; LEADS] = [0.6, 1.0, 0.4, -0.8, 0.2, 0.7, -0.5, -0.2, 0.4, 0.9, 1.0, 0.8];

use Abnormality::*;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub heart_rate_bpm: f64,
    /// Relative standard deviation of the RR intervals.
    pub rr_jitter_fraction: f64,
    pub pr_ms: f64,
    pub qrs_ms: f64,
    pub labels: [bool; N_CLASSES],
    pub lead_gains: [f64; LEADS],
    pub noise_std: f64,
    pub sample_rate_hz: u32,
    pub duration_s: f64,
    /// Position of the first R peak as a fraction of one RR interval.
    pub phase_fraction: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            heart_rate_bpm: 75.0,
            rr_jitter_fraction: 0.0,
            pr_ms: 160.0,
            qrs_ms: 90.0,
            labels: [false; N_CLASSES],
            lead_gains: LEAD_GAINS,
            noise_std: 0.0,
            sample_rate_hz: SAMPLE_RATE_HZ,
            duration_s: DURATION_S,
            phase_fraction: 0.5,
        }
    }
}

impl SynthParams {
    pub fn has(&self, c: Abnormality) -> bool {
        self.labels[c.index()]
    }

    pub fn samples(&self) -> usize {
        (self.sample_rate_hz as f64 * self.duration_s).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Input(m.to_string()));
        let finite = [
            self.heart_rate_bpm,
            self.rr_jitter_fraction,
            self.pr_ms,
            self.qrs_ms,
            self.noise_std,
            self.duration_s,
            self.phase_fraction,
        ];
        if finite.iter().chain(&self.lead_gains).any(|v| !v.is_finite()) {
            return bad("synthesis parameters must be finite");
        }
        if self.heart_rate_bpm <= 0.0 || self.pr_ms <= 0.0 || self.qrs_ms <= 0.0 || self.noise_std < 0.0 {
            return bad("rates and intervals must be positive, noise non-negative");
        }
        if !(0.0..0.5).contains(&self.rr_jitter_fraction) {
            return bad("rr_jitter_fraction must be in [0, 0.5)");
        }
        if !(0.0..=1.0).contains(&self.phase_fraction) {
            return bad("phase_fraction must be in [0, 1]");
        }
        if self.sample_rate_hz == 0 || (self.sample_rate_hz as f64 * self.duration_s - EXAM_SAMPLES as f64).abs() > 1e-6
        {
            return bad("sample_rate_hz × duration_s must equal 4096 samples");
        }
        let hr = self.heart_rate_bpm;
        let af = self.has(AtrialFibrillation);
        let checks = [
            (
                self.has(SinusTachycardia) && self.has(SinusBradycardia),
                "ST and SB cannot co-occur",
            ),
            (
                af && (self.has(SinusTachycardia) || self.has(SinusBradycardia)),
                "AF excludes sinus-rhythm labels",
            ),
            (
                af && self.has(FirstDegreeAvBlock),
                "AF has no P wave, so no PR-based 1dAVb",
            ),
            (
                self.has(SinusTachycardia) && hr <= 100.0,
                "ST requires heart rate above 100",
            ),
            (
                self.has(SinusBradycardia) && hr >= 50.0,
                "SB requires heart rate below 50",
            ),
            (
                !af && !self.has(SinusTachycardia) && hr > 100.0,
                "heart rate above 100 requires ST",
            ),
            (
                !af && !self.has(SinusBradycardia) && hr < 50.0,
                "heart rate below 50 requires SB",
            ),
            (
                self.has(FirstDegreeAvBlock) && self.pr_ms < 200.0,
                "1dAVb requires PR of at least 200 ms",
            ),
            (
                !af && !self.has(FirstDegreeAvBlock) && self.pr_ms >= 200.0,
                "PR of 200 ms or more requires 1dAVb",
            ),
            (
                (self.has(Rbbb) || self.has(Lbbb)) && self.qrs_ms < 120.0,
                "bundle branch block requires QRS of at least 120 ms",
            ),
            (
                !(self.has(Rbbb) || self.has(Lbbb)) && self.qrs_ms >= 120.0,
                "QRS of 120 ms or more requires a bundle branch block",
            ),
            (
                af && self.rr_jitter_fraction < 0.15,
                "AF requires RR jitter of at least 0.15",
            ),
        ];
        for (violated, msg) in checks {
            if violated {
                return bad(msg);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthExam {
    pub signal: Signal,
    pub labels: [bool; N_CLASSES],
    /// Measures of the beats as generated.
    pub measures: ExamMeasures,
    /// Sample indices of the generated R peaks.
    pub r_peaks: Vec<usize>,
}

fn bump(t: f64, center: f64, sigma: f64, amp: f64) -> f64 {
    let z = (t - center) / sigma;
    if z.abs() > 6.0 {
        0.0
    } else {
        amp * (-0.5 * z * z).exp()
    }
}

/// RR intervals whose mean and sample standard deviation are exactly
/// `mean` and `jitter·mean`, none shorter than half the mean.
fn rr_intervals<R: Rng + ?Sized>(count: usize, mean: f64, jitter: f64, rng: &mut R) -> Vec<f64> {
    if jitter == 0.0 || count < 2 {
        return vec![mean; count];
    }
    for _ in 0..100 {
        let z: Vec<f64> = (0..count).map(|_| StandardNormal.sample(rng)).collect();
        let m = z.iter().sum::<f64>() / count as f64;
        let s = (z.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (count - 1) as f64).sqrt();
        if s == 0.0 {
            continue;
        }
        let rr: Vec<f64> = z.iter().map(|v| mean * (1.0 + jitter * (v - m) / s)).collect();
        if rr.iter().all(|&r| r >= 0.5 * mean) {
            return rr;
        }
    }
    Vec::from_iter((0..count).map(|i| mean * (1.0 + jitter * if i % 2 == 0 { 1.0 } else { -1.0 })))
}

/// Beat times in seconds for the whole RR sequence, starting one beat before
/// the window, shifted so no R peak sits within two samples of either edge.
/// Returns `(time, preceding RR)` pairs and the times inside the window.
fn beat_times(p: &SynthParams, rr: &[f64]) -> (Vec<(f64, f64)>, Vec<f64>) {
    let dt = 1.0 / p.sample_rate_hz as f64;
    let end = (p.samples() - 1) as f64 * dt;
    let mut shift = 0.0;
    loop {
        let mut t = p.phase_fraction * rr[0] + shift - rr[0];
        let mut beats = Vec::with_capacity(rr.len() + 1);
        beats.push((t, rr[0]));
        for &r in rr {
            t += r;
            beats.push((t, r));
        }
        let near_edge = beats
            .iter()
            .any(|&(t, _)| (t > -2.5 * dt && t < 2.5 * dt) || (t > end - 2.5 * dt && t < end + 2.5 * dt));
        if !near_edge || shift > 0.05 {
            let inside = beats.iter().map(|b| b.0).filter(|&t| t >= 0.0 && t <= end).collect();
            return (beats, inside);
        }
        shift += 4.0 * dt;
    }
}

/// Synthesizes one exam. Deterministic in `(params, seed)`.
pub fn generate_exam(params: &SynthParams, seed: u64) -> Result<SynthExam> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = params.samples();
    let fs = params.sample_rate_hz as f64;
    let mean_rr = 60.0 / params.heart_rate_bpm;
    let count = (params.duration_s / mean_rr).ceil() as usize + 3;
    let rr = rr_intervals(count, mean_rr, params.rr_jitter_fraction, &mut rng);
    let (all_beats, times) = beat_times(params, &rr);

    let qrs = params.qrs_ms / 1000.0;
    let pr = params.pr_ms / 1000.0;
    let af = params.has(AtrialFibrillation);
    let fwave = (rng.random_range(5.0..7.0), rng.random_range(0.0..std::f64::consts::TAU));

    let mut canonical = vec![0.0f64; n];
    for &(tr, r) in &all_beats {
        let lo = ((tr - 1.0) * fs).floor().max(0.0) as usize;
        let hi = (((tr + 1.0) * fs).ceil() as usize).min(n);
        let qrs_onset = tr - qrs / 2.0;
        for (i, v) in canonical.iter_mut().enumerate().take(hi).skip(lo) {
            let ts = i as f64 / fs;
            let mut x = bump(ts, tr - 0.35 * qrs, qrs / 10.0, -0.15)
                + bump(ts, tr, qrs / 8.0, 1.0)
                + bump(ts, tr + 0.35 * qrs, qrs / 10.0, -0.25)
                + bump(ts, tr + qrs / 2.0 + 0.22 * r.sqrt(), 0.04, 0.3);
            if !af {
                x += bump(ts, qrs_onset - pr + 0.05, 0.02, 0.15);
            }
            if params.has(Rbbb) {
                x += bump(ts, tr + 0.3 * qrs, qrs / 10.0, 0.5);
            }
            if params.has(Lbbb) {
                x += bump(ts, tr + 0.3 * qrs, qrs / 8.0, -0.6);
            }
            *v += x;
        }
    }
    if af {
        for (i, v) in canonical.iter_mut().enumerate() {
            *v += 0.05 * (std::f64::consts::TAU * fwave.0 * i as f64 / fs + fwave.1).sin();
        }
    }

    let mut data = Vec::with_capacity(LEADS * n);
    for gain in params.lead_gains {
        for &c in &canonical {
            let noise = if params.noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                params.noise_std * z
            } else {
                0.0
            };
            data.push((gain * c + noise) as f32);
        }
    }

    let r_peaks: Vec<usize> = times.iter().map(|t| (t * fs).round() as usize).collect();
    let intervals: Vec<f64> = times.windows(2).map(|w| (w[1] - w[0]) * 1000.0).collect();
    let heart_rate = if intervals.is_empty() {
        params.heart_rate_bpm
    } else {
        60_000.0 / (intervals.iter().sum::<f64>() / intervals.len() as f64)
    };
    let sdnn = (intervals.len() >= 2).then(|| sample_std(&intervals));
    Ok(SynthExam {
        signal: Signal {
            data: Tensor::from_vec(&[LEADS, n], data)?,
            sample_rate_hz: params.sample_rate_hz,
        },
        labels: params.labels,
        measures: ExamMeasures {
            heart_rate: Some(heart_rate),
            qrs_ms: Some(params.qrs_ms),
            pr_ms: (!af).then_some(params.pr_ms),
            sdnn,
        },
        r_peaks,
    })
}

fn sample_std(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

/// Local maxima at or above half the global maximum, thinned with a 200 ms
/// refractory window that keeps the larger of two close peaks.
pub fn detect_r_peaks(lead: &[f32], sample_rate_hz: u32) -> Vec<usize> {
    let max = lead.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if lead.len() < 3 || !(max > 0.0) {
        return Vec::new();
    }
    let threshold = 0.5 * max;
    let refractory = (REFRACTORY_S * sample_rate_hz as f64).round() as usize;
    let mut peaks: Vec<usize> = Vec::new();
    for i in 1..lead.len() - 1 {
        let v = lead[i];
        if v < threshold || !(v > lead[i - 1] && v >= lead[i + 1]) {
            continue;
        }
        match peaks.last_mut() {
            Some(last) if i - *last < refractory => {
                if v > lead[*last] {
                    *last = i;
                }
            }
            _ => peaks.push(i),
        }
    }
    peaks
}

/// Sample standard deviation of successive peak intervals, in ms.
pub fn compute_sdnn(peaks: &[usize], sample_rate_hz: u32) -> Result<f64> {
    if peaks.len() < 3 {
        return Err(Error::InsufficientData(format!(
            "SDNN needs at least 3 peaks, got {}",
            peaks.len()
        )));
    }
    Ok(sample_std(&nn_intervals_ms(peaks, sample_rate_hz)))
}

pub fn nn_intervals_ms(peaks: &[usize], sample_rate_hz: u32) -> Vec<f64> {
    peaks
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 * 1000.0 / sample_rate_hz as f64)
        .collect()
}

/// Mean heart rate from peak positions; `None` with fewer than two peaks.
pub fn heart_rate_bpm(peaks: &[usize], sample_rate_hz: u32) -> Option<f64> {
    let rr = nn_intervals_ms(peaks, sample_rate_hz);
    (!rr.is_empty()).then(|| 60_000.0 / (rr.iter().sum::<f64>() / rr.len() as f64))
}

/// Per-class prevalences for a generated dataset.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prevalences(pub [f64; N_CLASSES]);

impl Prevalences {
    pub fn train() -> Self {
        Self(PREVALENCE_TRAIN)
    }

    pub fn test() -> Self {
        Self(PREVALENCE_TEST)
    }

    pub fn get(&self, c: Abnormality) -> f64 {
        self.0[c.index()]
    }

    pub fn set(&mut self, c: Abnormality, v: f64) {
        self.0[c.index()] = v;
    }

    /// Rhythm classes are drawn as one categorical choice and 1dAVb is drawn
    /// only outside AF, so their combined demands must be satisfiable.
    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Input(format!("prevalences must be in [0, 1], got {:?}", self.0)));
        }
        let rhythm = self.get(SinusBradycardia) + self.get(SinusTachycardia) + self.get(AtrialFibrillation);
        if rhythm > 1.0 + 1e-12 {
            return Err(Error::Input(format!(
                "SB, ST and AF are mutually exclusive; their prevalences sum to {rhythm}"
            )));
        }
        let avb = self.get(FirstDegreeAvBlock);
        if avb > 0.0 && avb > 1.0 - self.get(AtrialFibrillation) + 1e-12 {
            return Err(Error::Input(
                "1dAVb cannot co-occur with AF; prevalences too large".into(),
            ));
        }
        Ok(())
    }
}

/// Draws labels and parameters for exam `index` of a dataset.
pub fn sample_params(prev: &Prevalences, rng: &mut ChaCha8Rng) -> SynthParams {
    let mut labels = [false; N_CLASSES];
    let u: f64 = rng.random();
    let (sb, st, af) = (
        prev.get(SinusBradycardia),
        prev.get(SinusTachycardia),
        prev.get(AtrialFibrillation),
    );
    let rhythm = if u < sb {
        Some(SinusBradycardia)
    } else if u < sb + st {
        Some(SinusTachycardia)
    } else if u < sb + st + af {
        Some(AtrialFibrillation)
    } else {
        None
    };
    if let Some(r) = rhythm {
        labels[r.index()] = true;
    }
    let is_af = rhythm == Some(AtrialFibrillation);
    let avb_p = if af < 1.0 {
        prev.get(FirstDegreeAvBlock) / (1.0 - af)
    } else {
        0.0
    };
    let avb_draw: f64 = rng.random();
    labels[FirstDegreeAvBlock.index()] = !is_af && avb_draw < avb_p;
    labels[Rbbb.index()] = rng.random::<f64>() < prev.get(Rbbb);
    labels[Lbbb.index()] = rng.random::<f64>() < prev.get(Lbbb);

    let heart_rate_bpm = match rhythm {
        Some(SinusBradycardia) => rng.random_range(36.0..47.0),
        Some(SinusTachycardia) => rng.random_range(105.0..150.0),
        _ => rng.random_range(62.0..92.0),
    };
    let pr_ms = if labels[FirstDegreeAvBlock.index()] {
        rng.random_range(215.0..300.0)
    } else {
        rng.random_range(120.0..180.0)
    };
    let qrs_ms = if labels[Rbbb.index()] || labels[Lbbb.index()] {
        rng.random_range(130.0..160.0)
    } else {
        rng.random_range(70.0..105.0)
    };
    let rr_jitter_fraction = if is_af {
        rng.random_range(0.18..0.25)
    } else {
        rng.random_range(0.0..0.03)
    };
    let scale = rng.random_range(0.8..1.2);
    let lead_gains = LEAD_GAINS.map(|g| g * scale * rng.random_range(0.9..1.1));
    SynthParams {
        heart_rate_bpm,
        rr_jitter_fraction,
        pr_ms,
        qrs_ms,
        labels,
        lead_gains,
        noise_std: rng.random_range(0.005..0.03),
        phase_fraction: rng.random_range(0.25..0.75),
        ..SynthParams::default()
    }
}

/// A reproducible dataset: exam `i` depends only on `(seed, i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub n: usize,
    pub prevalences: Prevalences,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Input("dataset size must be positive".into()));
        }
        self.prevalences.validate()
    }

    pub fn exam_id(&self, i: usize) -> String {
        format!("s{}-{i:06}", self.seed)
    }

    pub fn params(&self, i: usize) -> SynthParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, &[0, i as u64]));
        sample_params(&self.prevalences, &mut rng)
    }

    pub fn exam(&self, i: usize) -> Result<SynthExam> {
        generate_exam(&self.params(i), seeds::derive(self.seed, &[1, i as u64]))
    }

    /// Simulated expert and automatic-classifier reports for exam `i`: each
    /// source misses a true label or flags a false one at a small rate.
    pub fn sources(&self, i: usize, labels: &[bool; N_CLASSES]) -> SourceFlags {
        let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(self.seed, &[2, i as u64]));
        let mut noisy = |miss: f64, false_pos: f64| {
            labels.map(|l| {
                let u: f64 = rng.random();
                if l {
                    u >= miss
                } else {
                    u < false_pos
                }
            })
        };
        SourceFlags {
            expert: noisy(0.05, 0.002),
            glasgow: noisy(0.1, 0.01),
            minnesota: noisy(0.1, 0.01),
        }
    }
}

pub fn generate_dataset(spec: &DatasetSpec) -> Result<Vec<SynthExam>> {
    spec.validate()?;
    (0..spec.n).map(|i| spec.exam(i)).collect()
}

/// Dataset-level metadata written next to the manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub spec: DatasetSpec,
    pub leads: usize,
    pub samples: usize,
    pub sample_rate_hz: u32,
    pub units: std::collections::BTreeMap<String, String>,
}

/// Line of `sources.jsonl`, the adjudicator's input format.
#[derive(Clone, Debug, Serialize)]
struct SourceLine<'a> {
    id: &'a str,
    #[serde(flatten)]
    flags: SourceFlags,
    #[serde(flatten)]
    measures: ExamMeasures,
}

/// Generates and writes a dataset: `signals/<id>.ecg`, `manifest.jsonl`,
/// `sources.jsonl` and `dataset.json`. Exams are generated one at a time.
///
/// The manifest measures are estimated from lead II (rate, SDNN) or taken
/// from the generator (QRS, PR).
pub fn write_dataset(spec: &DatasetSpec, dir: &Path) -> Result<Vec<ManifestEntry>> {
    spec.validate()?;
    fs::create_dir_all(dir.join("signals"))?;
    let mut manifest = Vec::with_capacity(spec.n);
    let mut sources = JsonlWriter::new(&dir.join("sources.jsonl"));
    for i in 0..spec.n {
        let exam = spec.exam(i)?;
        let id = spec.exam_id(i);
        let rel = format!("signals/{id}.ecg");
        exam.signal.write(&dir.join(&rel))?;
        let measures = measured(&exam);
        sources.push(&SourceLine {
            id: &id,
            flags: spec.sources(i, &exam.labels),
            measures,
        })?;
        manifest.push(ManifestEntry {
            id,
            path: rel,
            labels: exam.labels,
            heart_rate: measures.heart_rate,
            qrs_ms: measures.qrs_ms,
            pr_ms: measures.pr_ms,
            sdnn: measures.sdnn,
        });
    }
    write_manifest(&dir.join(MANIFEST_FILE), &manifest)?;
    sources.finish()?;
    let units = [("heart_rate", "bpm"), ("qrs_ms", "ms"), ("pr_ms", "ms"), ("sdnn", "ms")]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    write_json(
        &dir.join("dataset.json"),
        &DatasetInfo {
            spec: spec.clone(),
            leads: LEADS,
            samples: EXAM_SAMPLES,
            sample_rate_hz: SAMPLE_RATE_HZ,
            units,
        },
    )?;
    Ok(manifest)
}

/// Measures as a downstream reader would estimate them from the signal.
pub fn measured(exam: &SynthExam) -> ExamMeasures {
    let sr = exam.signal.sample_rate_hz;
    let peaks = detect_r_peaks(exam.signal.lead(DETECTION_LEAD), sr);
    ExamMeasures {
        heart_rate: heart_rate_bpm(&peaks, sr),
        sdnn: compute_sdnn(&peaks, sr).ok(),
        ..exam.measures
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean(hr: f64) -> SynthParams {
        let mut labels = [false; N_CLASSES];
        if hr > 100.0 {
            labels[SinusTachycardia.index()] = true;
        }
        if hr < 50.0 {
            labels[SinusBradycardia.index()] = true;
        }
        SynthParams {
            heart_rate_bpm: hr,
            labels,
            ..SynthParams::default()
        }
    }

    fn peaks(exam: &SynthExam) -> Vec<usize> {
        detect_r_peaks(exam.signal.lead(DETECTION_LEAD), exam.signal.sample_rate_hz)
    }

    #[test]
    fn sixty_bpm_gives_ten_even_beats() {
        let e = generate_exam(&clean(60.0), 1).unwrap();
        let p = peaks(&e);
        assert_eq!(p.len(), 10);
        let rr = nn_intervals_ms(&p, 400);
        assert!(rr.iter().all(|&r| r == 1000.0), "{rr:?}");
        assert_eq!(heart_rate_bpm(&p, 400), Some(60.0));
    }

    #[test]
    fn beat_count_recovered_across_rates() {
        for hr in (40..=180).step_by(7) {
            let e = generate_exam(&clean(hr as f64), hr as u64).unwrap();
            assert_eq!(peaks(&e).len(), e.r_peaks.len(), "{hr} bpm");
        }
        let e = generate_exam(&clean(120.0), 3).unwrap();
        let rate = heart_rate_bpm(&peaks(&e), 400).unwrap();
        assert!((rate - 120.0).abs() <= 2.0, "{rate}");
    }

    #[test]
    fn noise_does_not_change_count() {
        for seed in 0..10 {
            let quiet = generate_exam(&clean(75.0), seed).unwrap();
            let noisy = generate_exam(
                &SynthParams {
                    noise_std: 0.05,
                    ..clean(75.0)
                },
                seed,
            )
            .unwrap();
            assert_eq!(peaks(&quiet).len(), peaks(&noisy).len(), "seed {seed}");
        }
    }

    #[test]
    fn sdnn_tracks_jitter() {
        let still = generate_exam(&clean(80.0), 4).unwrap();
        let still_sdnn = compute_sdnn(&peaks(&still), 400).unwrap();
        assert!(still_sdnn < 5.0);
        let mut labels = [false; N_CLASSES];
        labels[AtrialFibrillation.index()] = true;
        let af = SynthParams {
            heart_rate_bpm: 80.0,
            rr_jitter_fraction: 0.2,
            labels,
            ..SynthParams::default()
        };
        for seed in 0..5 {
            let e = generate_exam(&af, seed).unwrap();
            let sdnn = compute_sdnn(&peaks(&e), 400).unwrap();
            assert!((sdnn / 150.0 - 1.0).abs() < 0.25, "seed {seed}: {sdnn}");
            assert!(sdnn >= 10.0 * still_sdnn.max(0.1));
        }
    }

    #[test]
    fn sdnn_closed_forms() {
        assert_eq!(compute_sdnn(&[0, 400, 800, 1200], 400).unwrap(), 0.0);
        let s = compute_sdnn(&[0, 320, 680, 1080], 400).unwrap();
        assert!((s - 100.0).abs() < 1e-9);
        assert!(matches!(compute_sdnn(&[0, 400], 400), Err(Error::InsufficientData(_))));
        assert!(detect_r_peaks(&[0.0; 4096], 400).is_empty());
    }

    #[test]
    fn deterministic_and_inconsistent_rejected() {
        let p = SynthParams {
            noise_std: 0.02,
            ..clean(70.0)
        };
        assert_eq!(generate_exam(&p, 9).unwrap(), generate_exam(&p, 9).unwrap());
        let mut st = clean(90.0);
        st.labels[SinusTachycardia.index()] = true;
        assert!(matches!(generate_exam(&st, 0), Err(Error::Input(_))));
        let mut avb = clean(70.0);
        avb.labels[FirstDegreeAvBlock.index()] = true;
        assert!(generate_exam(&avb, 0).is_err());
    }

    #[test]
    fn sampled_params_are_consistent_and_clear_of_thresholds() {
        let prev = Prevalences([0.2; N_CLASSES]);
        let spec = DatasetSpec {
            n: 400,
            prevalences: prev,
            seed: 3,
        };
        for i in 0..spec.n {
            let p = spec.params(i);
            p.validate().unwrap();
            if p.has(SinusTachycardia) {
                assert!(p.heart_rate_bpm >= 105.0);
            }
            if p.has(SinusBradycardia) {
                assert!(p.heart_rate_bpm <= 47.5);
            }
            if p.has(FirstDegreeAvBlock) {
                assert!(p.pr_ms >= 210.0);
            }
            if p.has(Rbbb) || p.has(Lbbb) {
                assert!(p.qrs_ms >= 126.0);
            }
        }
    }

    #[test]
    fn contradictory_prevalences_rejected() {
        let mut p = Prevalences([0.0; N_CLASSES]);
        p.set(SinusBradycardia, 0.6);
        p.set(SinusTachycardia, 0.5);
        assert!(matches!(p.validate(), Err(Error::Input(_))));
        assert!(Prevalences::test().validate().is_ok());
    }

    #[test]
    fn zero_prevalence_is_all_normal() {
        let spec = DatasetSpec {
            n: 50,
            prevalences: Prevalences([0.0; N_CLASSES]),
            seed: 1,
        };
        assert!((0..spec.n).all(|i| spec.params(i).labels == [false; N_CLASSES]));
    }
}
