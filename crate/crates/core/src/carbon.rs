//! Power, energy and CO₂e accounting for training runs.
//!
//! Energy is `pue × hours × watts / 1000` where `watts` is the summed draw of
//! CPUs, DRAM and GPUs across all machines. Emissions are the energy times a
//! grid emission factor in kg/kWh. Every value is kept at full precision;
//! rounding to two decimals happens only when a report is rendered, which is
//! what makes the row totals balance.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_PUE: f64 = 1.58;
/// kg CO₂e per kWh (30 g/kWh).
pub const DEFAULT_EMISSION_FACTOR: f64 = 0.030;

fn default_pue() -> f64 {
    DEFAULT_PUE
}

fn default_machines() -> u32 {
    1
}

/// Hardware wattage and duration of one training or evaluation setting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PowerProfile {
    pub name: String,
    #[serde(default)]
    pub n_cpus: u32,
    /// Watts per CPU socket.
    #[serde(default)]
    pub cpu_watts: f64,
    #[serde(default)]
    pub n_gpus: u32,
    /// Watts per GPU.
    #[serde(default)]
    pub gpu_watts: f64,
    /// Total DRAM draw of one machine, in watts.
    #[serde(default)]
    pub dram_watts: f64,
    #[serde(default = "default_machines")]
    pub n_machines: u32,
    #[serde(default = "default_pue")]
    pub pue: f64,
    #[serde(default)]
    pub hours: f64,
}

impl PowerProfile {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("cpu_watts", self.cpu_watts),
            ("gpu_watts", self.gpu_watts),
            ("dram_watts", self.dram_watts),
            ("hours", self.hours),
        ];
        for (field, value) in fields {
            if !value.is_finite() || value < 0.0 {
                return Err(Error::Config(format!(
                    "profile {:?}: {field} must be a nonnegative number, got {value}",
                    self.name
                )));
            }
        }
        if !self.pue.is_finite() || self.pue < 1.0 {
            return Err(Error::Config(format!(
                "profile {:?}: pue must be >= 1, got {}",
                self.name, self.pue
            )));
        }
        Ok(())
    }

    /// Summed draw of all machines in watts.
    pub fn total_power(&self) -> f64 {
        let per_machine = f64::from(self.n_cpus) * self.cpu_watts
            + self.dram_watts
            + f64::from(self.n_gpus) * self.gpu_watts;
        f64::from(self.n_machines) * per_machine
    }

    /// PUE-adjusted energy in kWh.
    pub fn energy(&self) -> f64 {
        self.pue * self.hours * self.total_power() / 1000.0
    }
}

/// kg CO₂e for `energy_kwh` at `factor` kg/kWh.
pub fn co2e(energy_kwh: f64, factor: f64) -> f64 {
    factor * energy_kwh
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmissionsRow {
    pub name: String,
    pub total_watts: f64,
    pub hours: f64,
    pub energy_pue_kwh: f64,
    pub co2e_kg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EmissionsReport {
    pub emission_factor: f64,
    pub rows: Vec<EmissionsRow>,
    pub total_co2e_kg: f64,
}

pub fn report(profiles: &[PowerProfile], emission_factor: f64) -> Result<EmissionsReport> {
    if profiles.is_empty() {
        return Err(Error::InvalidInput(
            "an emissions report needs at least one profile".into(),
        ));
    }
    if !emission_factor.is_finite() || emission_factor < 0.0 {
        return Err(Error::Config(format!(
            "emission factor must be nonnegative, got {emission_factor}"
        )));
    }
    let mut rows = Vec::with_capacity(profiles.len());
    for profile in profiles {
        profile.validate()?;
        let energy = profile.energy();
        rows.push(EmissionsRow {
            name: profile.name.clone(),
            total_watts: profile.total_power(),
            hours: profile.hours,
            energy_pue_kwh: energy,
            co2e_kg: co2e(energy, emission_factor),
        });
    }
    let total_co2e_kg = rows.iter().map(|r| r.co2e_kg).sum();
    Ok(EmissionsReport {
        emission_factor,
        rows,
        total_co2e_kg,
    })
}

/// Integers print bare, everything else with two decimals.
fn fmt_quantity(value: f64) -> String {
    if value.fract() == 0.0 && value.abs() < 1e15 {
        format!("{value:.0}")
    } else {
        format!("{value:.2}")
    }
}

const TOTAL_LABEL: &str = "Total CO2e";

impl EmissionsReport {
    pub fn render_table(&self) -> String {
        let header = ["Model", "Power (W)", "Time (h)", "(PUE·kWh)", "CO2e (kg)"];
        let mut cells: Vec<[String; 5]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.name.clone(),
                    fmt_quantity(r.total_watts),
                    fmt_quantity(r.hours),
                    format!("{:.2}", r.energy_pue_kwh),
                    format!("{:.2}", r.co2e_kg),
                ]
            })
            .collect();
        cells.push([
            TOTAL_LABEL.to_string(),
            String::new(),
            String::new(),
            String::new(),
            format!("{:.2}", self.total_co2e_kg),
        ]);

        let mut widths = header.map(|h| h.chars().count());
        for row in &cells {
            for (w, cell) in widths.iter_mut().zip(row) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let rule: String = "-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1));

        let mut out = String::new();
        let push_row = |out: &mut String, row: &[String]| {
            let mut line = String::new();
            for (i, (cell, w)) in row.iter().zip(widths).enumerate() {
                let pad = w - cell.chars().count();
                if i == 0 {
                    line.push_str(cell);
                    line.push_str(&" ".repeat(pad));
                } else {
                    line.push_str("  ");
                    line.push_str(&" ".repeat(pad));
                    line.push_str(cell);
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        };
        push_row(&mut out, &header.map(String::from));
        out.push_str(&rule);
        out.push('\n');
        let (body, total) = cells.split_at(cells.len() - 1);
        for row in body {
            push_row(&mut out, row);
        }
        out.push_str(&rule);
        out.push('\n');
        push_row(&mut out, &total[0]);
        out
    }

    pub fn render_tsv(&self) -> String {
        let mut out = String::from("model\tpower_w\ttime_h\tenergy_pue_kwh\tco2e_kg\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{:.2}\t{:.2}",
                r.name,
                fmt_quantity(r.total_watts),
                fmt_quantity(r.hours),
                r.energy_pue_kwh,
                r.co2e_kg
            );
        }
        let _ = writeln!(out, "{TOTAL_LABEL}\t\t\t\t{:.2}", self.total_co2e_kg);
        out
    }
}

#[derive(Debug, Deserialize)]
struct ProfileFile {
    #[serde(default)]
    emission_factor: Option<f64>,
    #[serde(default)]
    profile: Vec<PowerProfile>,
}

/// Profiles plus an optional emission factor read from a TOML file holding
/// one or more `[[profile]]` tables.
pub fn load_profiles(path: &Path) -> Result<(Vec<PowerProfile>, Option<f64>)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_profiles(&text).map_err(|e| match e {
        Error::Parse { message, .. } => Error::parse(path.display().to_string(), message),
        other => other,
    })
}

pub fn parse_profiles(text: &str) -> Result<(Vec<PowerProfile>, Option<f64>)> {
    let file: ProfileFile = toml::from_str(text).map_err(|e| Error::parse("profile", e))?;
    if file.profile.is_empty() {
        return Err(Error::parse("profile", "no [[profile]] tables found"));
    }
    for p in &file.profile {
        p.validate()?;
    }
    Ok((file.profile, file.emission_factor))
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn pretrain_profile() -> PowerProfile {
        PowerProfile {
            name: "Pre-train".into(),
            n_cpus: 2,
            cpu_watts: 150.0,
            n_gpus: 4,
            gpu_watts: 300.0,
            dram_watts: 20.0,
            n_machines: 32,
            pue: DEFAULT_PUE,
            hours: 20.0,
        }
    }

    pub(crate) fn eval_profile() -> PowerProfile {
        PowerProfile {
            name: "Evaluation".into(),
            n_cpus: 2,
            cpu_watts: 125.0,
            n_gpus: 1,
            gpu_watts: 300.0,
            dram_watts: 39.0,
            n_machines: 1,
            pue: DEFAULT_PUE,
            hours: 1.0,
        }
    }

    fn zero_profile() -> PowerProfile {
        PowerProfile {
            name: "zero".into(),
            n_cpus: 0,
            cpu_watts: 0.0,
            n_gpus: 0,
            gpu_watts: 0.0,
            dram_watts: 0.0,
            n_machines: 1,
            pue: DEFAULT_PUE,
            hours: 0.0,
        }
    }

    #[test]
    fn total_power_matches_reported_setups() {
        assert_eq!(pretrain_profile().total_power(), 48_640.0);
        assert_eq!(eval_profile().total_power(), 589.0);
        assert_eq!(zero_profile().total_power(), 0.0);
    }

    #[test]
    fn energy_rounds_to_reported_values() {
        assert_eq!(format!("{:.2}", pretrain_profile().energy()), "1537.02");
        assert_eq!(format!("{:.2}", eval_profile().energy()), "0.93");
        let mut p = pretrain_profile();
        p.hours = 0.0;
        assert_eq!(p.energy(), 0.0);
    }

    #[test]
    fn co2e_rounds_to_reported_values() {
        assert_eq!(format!("{:.2}", co2e(1537.02, 0.030)), "46.11");
        assert_eq!(format!("{:.2}", co2e(0.93, 0.030)), "0.03");
        assert_eq!(co2e(1234.5, 0.0), 0.0);
    }

    #[test]
    fn total_only_balances_without_intermediate_rounding() {
        let r = report(&[pretrain_profile(), eval_profile()], DEFAULT_EMISSION_FACTOR).unwrap();
        assert_eq!(format!("{:.2}", r.total_co2e_kg), "46.14");
        // Rounding each row first would give 46.11 + 0.03 as well, but the
        // unrounded eval row is 0.0279, so the sum must be taken unrounded.
        let unrounded: f64 = r.rows.iter().map(|row| row.co2e_kg).sum();
        assert_eq!(unrounded, r.total_co2e_kg);
    }

    #[test]
    fn zero_profile_gives_zero_row() {
        let r = report(&[zero_profile()], DEFAULT_EMISSION_FACTOR).unwrap();
        assert_eq!(r.rows[0].total_watts, 0.0);
        assert_eq!(r.rows[0].energy_pue_kwh, 0.0);
        assert_eq!(r.rows[0].co2e_kg, 0.0);
        assert_eq!(r.total_co2e_kg, 0.0);
    }

    #[test]
    fn synthetic_profiles_total_is_full_precision_sum() {
        let profiles: Vec<PowerProfile> = (1..=3)
            .map(|i| PowerProfile {
                name: format!("p{i}"),
                n_cpus: i,
                cpu_watts: 97.3 * f64::from(i),
                n_gpus: 2 * i,
                gpu_watts: 251.7,
                dram_watts: 13.1,
                n_machines: i + 1,
                pue: 1.1 + 0.2 * f64::from(i),
                hours: 3.7 * f64::from(i),
            })
            .collect();
        let r = report(&profiles, 0.047).unwrap();
        let mut expected = 0.0;
        for p in &profiles {
            let watts = f64::from(p.n_machines)
                * (f64::from(p.n_cpus) * p.cpu_watts
                    + p.dram_watts
                    + f64::from(p.n_gpus) * p.gpu_watts);
            expected += 0.047 * (p.pue * p.hours * watts / 1000.0);
        }
        assert!((r.total_co2e_kg - expected).abs() < 1e-9);
    }

    #[test]
    fn rejects_bad_profiles() {
        let mut p = eval_profile();
        p.pue = 0.9;
        assert!(report(&[p], DEFAULT_EMISSION_FACTOR).is_err());
        assert!(report(&[], DEFAULT_EMISSION_FACTOR).is_err());
    }

    #[test]
    fn table_rows_end_with_emissions() {
        let r = report(&[pretrain_profile(), eval_profile()], DEFAULT_EMISSION_FACTOR).unwrap();
        let table = r.render_table();
        let lines: Vec<&str> = table.lines().collect();
        assert!(lines.iter().any(|l| l.starts_with("Pre-train") && l.ends_with("46.11")));
        assert!(lines.iter().any(|l| l.starts_with("Evaluation") && l.ends_with("0.03")));
        assert!(lines.last().unwrap().ends_with("46.14"));
        assert!(table.contains("48640"));
        assert!(table.contains("1537.02"));
        let tsv = r.render_tsv();
        assert!(tsv.contains("Pre-train\t48640\t20\t1537.02\t46.11"));
    }

    #[test]
    fn parses_profile_file() {
        let text = r#"
emission_factor = 0.030

[[profile]]
name = "Pre-train"
n_machines = 32
n_cpus = 2
cpu_watts = 150
n_gpus = 4
gpu_watts = 300
dram_watts = 20
hours = 20
"#;
        let (profiles, factor) = parse_profiles(text).unwrap();
        assert_eq!(factor, Some(0.030));
        assert_eq!(profiles[0], pretrain_profile());
        assert!(parse_profiles("").is_err());
    }

    #[test]
    fn energy_is_linear_in_time() {
        let base = eval_profile();
        for k in [0.5, 2.0, 7.0] {
            let mut scaled = base.clone();
            scaled.hours *= k;
            assert!((scaled.energy() - k * base.energy()).abs() < 1e-12);
        }
    }
}
