//! Flat key-value parameter documents (`key = value`, arrays in bracketed
//! comma lists, matrices as nested brackets) shared by the parameter files,
//! hyperparameter files, estimation settings and simulation configs. The
//! format is line-oriented and diff-friendly; `#` starts a comment. Floats
//! are written with 17 significant digits so documents round-trip exactly.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::math::Mat;
use crate::model::{FixedEffects, Hyperparameters, PriorScales};
use crate::saem::SaemSettings;
use crate::simulate::{LinkMode, SimulationConfig};

/// 17-significant-digit float formatting; parses back to the same bits.
pub fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

// ---------------------------------------------------------------------------
// Key-value document
// ---------------------------------------------------------------------------

/// Parsed document: ordered `(key, raw value, line number)` entries.
#[derive(Debug, Clone, Default)]
pub struct KvDoc {
    path: String,
    entries: Vec<(String, String, usize)>,
}

impl KvDoc {
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some(eq) = line.find('=') else {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    field: "line".into(),
                    message: "expected key = value".into(),
                });
            };
            let key = line[..eq].trim().to_string();
            let value = line[eq + 1..].trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    path: path.to_string(),
                    line: idx + 1,
                    field: "key".into(),
                    message: "empty key".into(),
                });
            }
            entries.push((key, value, idx + 1));
        }
        Ok(Self { path: path.to_string(), entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text, &path.display().to_string())
    }

    fn find(&self, key: &str) -> Result<(&str, usize)> {
        self.entries
            .iter()
            .find(|(k, _, _)| k == key)
            .map(|(_, v, line)| (v.as_str(), *line))
            .ok_or_else(|| Error::Parse {
                path: self.path.clone(),
                line: 0,
                field: key.to_string(),
                message: "missing key".into(),
            })
    }

    fn parse_err(&self, key: &str, line: usize, message: String) -> Error {
        Error::Parse { path: self.path.clone(), line, field: key.to_string(), message }
    }

    pub fn get_str(&self, key: &str) -> Result<String> {
        Ok(self.find(key)?.0.to_string())
    }

    pub fn get_f64(&self, key: &str) -> Result<f64> {
        let (raw, line) = self.find(key)?;
        raw.parse().map_err(|_| self.parse_err(key, line, format!("not a number: {raw:?}")))
    }

    pub fn get_usize(&self, key: &str) -> Result<usize> {
        let (raw, line) = self.find(key)?;
        raw.parse().map_err(|_| self.parse_err(key, line, format!("not an integer: {raw:?}")))
    }

    pub fn get_u64(&self, key: &str) -> Result<u64> {
        let (raw, line) = self.find(key)?;
        raw.parse().map_err(|_| self.parse_err(key, line, format!("not an integer: {raw:?}")))
    }

    pub fn get_vec(&self, key: &str) -> Result<Vec<f64>> {
        let (raw, line) = self.find(key)?;
        parse_vec(raw).map_err(|m| self.parse_err(key, line, m))
    }

    pub fn get_mat(&self, key: &str) -> Result<Mat> {
        let (raw, line) = self.find(key)?;
        let rows = parse_rows(raw).map_err(|m| self.parse_err(key, line, m))?;
        Mat::from_rows(&rows)
    }
}

fn parse_vec(raw: &str) -> std::result::Result<Vec<f64>, String> {
    let inner = raw
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("expected [a, b, ...], got {raw:?}"))?;
    if inner.trim().is_empty() {
        return Ok(Vec::new());
    }
    inner
        .split(',')
        .map(|tok| tok.trim().parse::<f64>().map_err(|_| format!("not a number: {tok:?}")))
        .collect()
}

fn parse_rows(raw: &str) -> std::result::Result<Vec<Vec<f64>>, String> {
    let inner = raw
        .strip_prefix('[')
        .and_then(|s| s.strip_suffix(']'))
        .ok_or_else(|| format!("expected [[...], [...]], got {raw:?}"))?;
    let mut rows = Vec::new();
    let mut depth = 0usize;
    let mut start = None;
    for (i, c) in inner.char_indices() {
        match c {
            '[' => {
                if depth == 0 {
                    start = Some(i);
                }
                depth += 1;
            }
            ']' => {
                if depth == 0 {
                    return Err("unbalanced brackets".into());
                }
                depth -= 1;
                if depth == 0 {
                    let row = &inner[start.unwrap()..=i];
                    rows.push(parse_vec(row)?);
                    start = None;
                }
            }
            _ => {}
        }
    }
    if depth != 0 {
        return Err("unbalanced brackets".into());
    }
    Ok(rows)
}

/// Ordered writer producing the same format [`KvDoc`] parses.
#[derive(Debug, Default)]
pub struct KvWriter {
    lines: Vec<String>,
}

impl KvWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn comment(&mut self, text: &str) {
        self.lines.push(format!("# {text}"));
    }

    pub fn blank(&mut self) {
        self.lines.push(String::new());
    }

    pub fn str(&mut self, key: &str, value: &str) {
        self.lines.push(format!("{key} = {value}"));
    }

    pub fn usize(&mut self, key: &str, value: usize) {
        self.lines.push(format!("{key} = {value}"));
    }

    pub fn u64(&mut self, key: &str, value: u64) {
        self.lines.push(format!("{key} = {value}"));
    }

    pub fn f64(&mut self, key: &str, value: f64) {
        self.lines.push(format!("{key} = {}", fmt_float(value)));
    }

    pub fn vec(&mut self, key: &str, values: &[f64]) {
        let body: Vec<String> = values.iter().map(|v| fmt_float(*v)).collect();
        self.lines.push(format!("{key} = [{}]", body.join(", ")));
    }

    pub fn mat(&mut self, key: &str, m: &Mat) {
        let rows: Vec<String> = (0..m.rows())
            .map(|r| {
                let body: Vec<String> = m.row(r).iter().map(|v| fmt_float(*v)).collect();
                format!("[{}]", body.join(", "))
            })
            .collect();
        self.lines.push(format!("{key} = [{}]", rows.join(", ")));
    }

    pub fn to_text(&self) -> String {
        let mut text = self.lines.join("\n");
        text.push('\n');
        text
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Typed documents
// ---------------------------------------------------------------------------

fn push_fixed_effects(w: &mut KvWriter, fe: &FixedEffects) {
    w.usize("n_outcomes", fe.n_outcomes());
    w.usize("n_events", fe.n_events());
    w.usize("n_sources", fe.n_sources());
    w.f64("t0", fe.t0);
    w.f64("sigma_tau", fe.sigma_tau);
    w.f64("sigma_xi", fe.sigma_xi);
    w.vec("g", &fe.g);
    w.vec("v0", &fe.v0);
    w.vec("sigma_noise", &fe.sigma_noise);
    w.vec("nu", &fe.nu);
    w.vec("rho", &fe.rho);
    w.mat("beta", &fe.beta);
    w.mat("zeta", &fe.zeta);
}

fn fixed_effects_from_doc(doc: &KvDoc) -> Result<FixedEffects> {
    let fe = FixedEffects {
        t0: doc.get_f64("t0")?,
        sigma_tau: doc.get_f64("sigma_tau")?,
        sigma_xi: doc.get_f64("sigma_xi")?,
        g: doc.get_vec("g")?,
        v0: doc.get_vec("v0")?,
        sigma_noise: doc.get_vec("sigma_noise")?,
        nu: doc.get_vec("nu")?,
        rho: doc.get_vec("rho")?,
        beta: doc.get_mat("beta")?,
        zeta: doc.get_mat("zeta")?,
    };
    let k = doc.get_usize("n_outcomes")?;
    let l = doc.get_usize("n_events")?;
    let ns = doc.get_usize("n_sources")?;
    if fe.n_outcomes() != k || fe.n_events() != l || fe.n_sources() != ns {
        return Err(Error::DimensionMismatch(
            "declared sizes disagree with the parameter arrays".into(),
        ));
    }
    fe.validate()?;
    Ok(fe)
}

/// Write a parameter document (`params.out` format).
pub fn write_fixed_effects(path: &Path, fe: &FixedEffects) -> Result<()> {
    let mut w = KvWriter::new();
    w.comment("joint model parameters");
    push_fixed_effects(&mut w, fe);
    w.write(path)
}

pub fn read_fixed_effects(path: &Path) -> Result<FixedEffects> {
    fixed_effects_from_doc(&KvDoc::read(path)?)
}

pub fn write_hyperparameters(path: &Path, hyper: &Hyperparameters) -> Result<()> {
    let mut w = KvWriter::new();
    w.comment("structural sizes and prior scales");
    w.usize("n_outcomes", hyper.n_outcomes);
    w.usize("n_events", hyper.n_events);
    w.usize("n_sources", hyper.n_sources);
    w.f64("prior_scale_g", hyper.prior_scales.g);
    w.f64("prior_scale_v0", hyper.prior_scales.v0);
    w.f64("prior_scale_nu", hyper.prior_scales.nu);
    w.f64("prior_scale_rho", hyper.prior_scales.rho);
    w.f64("prior_scale_beta", hyper.prior_scales.beta);
    w.f64("prior_scale_zeta", hyper.prior_scales.zeta);
    w.write(path)
}

pub fn read_hyperparameters(path: &Path) -> Result<Hyperparameters> {
    let doc = KvDoc::read(path)?;
    let hyper = Hyperparameters {
        n_outcomes: doc.get_usize("n_outcomes")?,
        n_events: doc.get_usize("n_events")?,
        n_sources: doc.get_usize("n_sources")?,
        prior_scales: PriorScales {
            g: doc.get_f64("prior_scale_g")?,
            v0: doc.get_f64("prior_scale_v0")?,
            nu: doc.get_f64("prior_scale_nu")?,
            rho: doc.get_f64("prior_scale_rho")?,
            beta: doc.get_f64("prior_scale_beta")?,
            zeta: doc.get_f64("prior_scale_zeta")?,
        },
    };
    hyper.validate()?;
    Ok(hyper)
}

pub fn write_saem_settings(path: &Path, settings: &SaemSettings) -> Result<()> {
    let mut w = KvWriter::new();
    w.comment("estimation settings");
    w.usize("n_iterations", settings.n_iterations);
    w.usize("n_burnin", settings.n_burnin);
    w.usize("n_robbins_monro", settings.n_robbins_monro);
    w.usize("n_prefit", settings.n_prefit);
    w.f64("sa_decay_exponent", settings.sa_decay_exponent);
    w.f64("target_acceptance", settings.target_acceptance);
    w.usize("adaptation_interval", settings.adaptation_interval);
    w.f64("adaptation_factor", settings.adaptation_factor);
    w.f64("proposal_scale", settings.proposal_scale);
    w.usize("n_re_transitions", settings.n_re_transitions);
    w.u64("seed", settings.seed);
    w.write(path)
}

pub fn read_saem_settings(path: &Path) -> Result<SaemSettings> {
    let doc = KvDoc::read(path)?;
    let settings = SaemSettings {
        n_iterations: doc.get_usize("n_iterations")?,
        n_burnin: doc.get_usize("n_burnin")?,
        n_robbins_monro: doc.get_usize("n_robbins_monro")?,
        n_prefit: doc.get_usize("n_prefit")?,
        sa_decay_exponent: doc.get_f64("sa_decay_exponent")?,
        target_acceptance: doc.get_f64("target_acceptance")?,
        adaptation_interval: doc.get_usize("adaptation_interval")?,
        adaptation_factor: doc.get_f64("adaptation_factor")?,
        proposal_scale: doc.get_f64("proposal_scale")?,
        n_re_transitions: doc.get_usize("n_re_transitions")?,
        seed: doc.get_u64("seed")?,
    };
    settings.validate()?;
    Ok(settings)
}

pub fn write_simulation_config(path: &Path, config: &SimulationConfig) -> Result<()> {
    let mut w = KvWriter::new();
    w.comment("cohort simulation config");
    w.usize("n_patients", config.n_patients);
    w.u64("seed", config.seed);
    w.str("link_mode", config.link_mode.as_str());
    w.f64("baseline_offset_mean", config.baseline_offset_mean);
    w.f64("baseline_offset_sd", config.baseline_offset_sd);
    w.f64("followup_mean", config.followup_mean);
    w.f64("followup_sd", config.followup_sd);
    w.f64("intervisit_mean", config.intervisit_mean);
    w.f64("intervisit_sd", config.intervisit_sd);
    w.f64("padding_interval", config.padding_interval);
    w.blank();
    w.comment("generating fixed effects");
    push_fixed_effects(&mut w, &config.fixed);
    w.write(path)
}

pub fn read_simulation_config(path: &Path) -> Result<SimulationConfig> {
    let doc = KvDoc::read(path)?;
    // The generating parameters may use zero noise, so skip the strict
    // positivity check done by fixed_effects_from_doc and validate at the
    // config level instead.
    let fe = FixedEffects {
        t0: doc.get_f64("t0")?,
        sigma_tau: doc.get_f64("sigma_tau")?,
        sigma_xi: doc.get_f64("sigma_xi")?,
        g: doc.get_vec("g")?,
        v0: doc.get_vec("v0")?,
        sigma_noise: doc.get_vec("sigma_noise")?,
        nu: doc.get_vec("nu")?,
        rho: doc.get_vec("rho")?,
        beta: doc.get_mat("beta")?,
        zeta: doc.get_mat("zeta")?,
    };
    let config = SimulationConfig {
        n_patients: doc.get_usize("n_patients")?,
        fixed: fe,
        baseline_offset_mean: doc.get_f64("baseline_offset_mean")?,
        baseline_offset_sd: doc.get_f64("baseline_offset_sd")?,
        followup_mean: doc.get_f64("followup_mean")?,
        followup_sd: doc.get_f64("followup_sd")?,
        intervisit_mean: doc.get_f64("intervisit_mean")?,
        intervisit_sd: doc.get_f64("intervisit_sd")?,
        padding_interval: doc.get_f64("padding_interval")?,
        link_mode: LinkMode::parse(&doc.get_str("link_mode")?)?,
        seed: doc.get_u64("seed")?,
    };
    config.validate()?;
    Ok(config)
}
