//! Power producers: trace replay, irradiance-driven solar, and a power-curve
//! wind turbine.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signals::{Sample, Trace};
use crate::time::Timestamp;

/// Typical efficiency band for commercial panels; values outside it are
/// allowed but reported by [`SolarPanelSpec::warnings`].
pub const TYPICAL_EFFICIENCY: (f64, f64) = (0.15, 0.20);

pub const DEFAULT_SHEAR_EXPONENT: f64 = 1.0 / 7.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolarPanelSpec {
    pub area_m2: f64,
    pub efficiency: f64,
}

impl SolarPanelSpec {
    pub fn new(area_m2: f64, efficiency: f64) -> Result<Self> {
        let spec = SolarPanelSpec { area_m2, efficiency };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.area_m2.is_finite() && self.area_m2 > 0.0) {
            return Err(Error::config(format!("panel area must be > 0 m2, got {}", self.area_m2)));
        }
        if !(self.efficiency > 0.0 && self.efficiency <= 1.0) {
            return Err(Error::config(format!(
                "panel efficiency must be in (0, 1], got {}",
                self.efficiency
            )));
        }
        Ok(())
    }

    pub fn warnings(&self) -> Vec<String> {
        let (lo, hi) = TYPICAL_EFFICIENCY;
        if self.efficiency < lo || self.efficiency > hi {
            vec![format!(
                "panel efficiency {} is outside the typical range of {:.0}-{:.0}%",
                self.efficiency,
                lo * 100.0,
                hi * 100.0
            )]
        } else {
            Vec::new()
        }
    }
}

/// Irradiance (W/m2, as provided by the trace) times area times efficiency.
pub fn solar_power(irradiance_w_m2: f64, spec: &SolarPanelSpec) -> Result<f64> {
    if irradiance_w_m2.is_nan() || irradiance_w_m2 < 0.0 {
        return Err(Error::input(format!("irradiance must be >= 0, got {irradiance_w_m2}")));
    }
    Ok(irradiance_w_m2 * spec.area_m2 * spec.efficiency)
}

/// Discrete (wind speed m/s, power W) points, linearly interpolated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<(f64, f64)>", into = "Vec<(f64, f64)>")]
pub struct PowerCurve {
    points: Vec<(f64, f64)>,
}

impl PowerCurve {
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::config("power curve needs at least one point"));
        }
        if points.windows(2).any(|w| w[1].0 <= w[0].0) {
            return Err(Error::config("power curve speeds must be strictly increasing"));
        }
        if points.iter().any(|(v, p)| !v.is_finite() || !p.is_finite() || *p < 0.0) {
            return Err(Error::config("power curve values must be finite and powers >= 0"));
        }
        Ok(PowerCurve { points })
    }

    /// Reads a `wind_speed_mps,power_w` CSV.
    pub fn load_csv(path: impl AsRef<Path>) -> Result<Self> {
        let points = read_pairs(path.as_ref(), "wind_speed_mps", "power_w")?;
        PowerCurve::new(points)
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// Linear interpolation, held at the endpoint values outside the curve.
    pub fn power_at(&self, speed: f64) -> f64 {
        interpolate_clamped(&self.points, speed)
    }
}

impl TryFrom<Vec<(f64, f64)>> for PowerCurve {
    type Error = Error;

    fn try_from(points: Vec<(f64, f64)>) -> Result<Self> {
        PowerCurve::new(points)
    }
}

impl From<PowerCurve> for Vec<(f64, f64)> {
    fn from(c: PowerCurve) -> Self {
        c.points
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindTurbineSpec {
    pub power_curve: PowerCurve,
    pub cut_in_mps: f64,
    pub cut_out_mps: f64,
    pub hub_height_m: f64,
    pub reference_height_m: f64,
    #[serde(default = "default_shear")]
    pub shear_exponent: f64,
}

fn default_shear() -> f64 {
    DEFAULT_SHEAR_EXPONENT
}

impl WindTurbineSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cut_in_mps >= 0.0 && self.cut_in_mps < self.cut_out_mps) {
            return Err(Error::config(format!(
                "cut-in ({}) must be >= 0 and below cut-out ({})",
                self.cut_in_mps, self.cut_out_mps
            )));
        }
        if !(self.hub_height_m > 0.0 && self.reference_height_m > 0.0) {
            return Err(Error::config("hub and reference heights must be > 0"));
        }
        if !self.shear_exponent.is_finite() {
            return Err(Error::config("shear exponent must be finite"));
        }
        Ok(())
    }

    /// Power-law height correction from the reference to the hub height.
    pub fn hub_speed(&self, reference_speed: f64) -> f64 {
        if self.hub_height_m == self.reference_height_m {
            return reference_speed;
        }
        reference_speed * (self.hub_height_m / self.reference_height_m).powf(self.shear_exponent)
    }
}

pub fn wind_power(reference_speed_mps: f64, spec: &WindTurbineSpec) -> Result<f64> {
    if reference_speed_mps.is_nan() || reference_speed_mps < 0.0 {
        return Err(Error::input(format!("wind speed must be >= 0, got {reference_speed_mps}")));
    }
    let v = spec.hub_speed(reference_speed_mps);
    if v < spec.cut_in_mps || v > spec.cut_out_mps {
        return Ok(0.0);
    }
    Ok(spec.power_curve.power_at(v))
}

pub(crate) fn interpolate_clamped(points: &[(f64, f64)], x: f64) -> f64 {
    let (x0, y0) = points[0];
    let (xn, yn) = points[points.len() - 1];
    if x <= x0 {
        return y0;
    }
    if x >= xn {
        return yn;
    }
    let i = points.partition_point(|(px, _)| *px <= x);
    let (xa, ya) = points[i - 1];
    let (xb, yb) = points[i];
    if x == xa {
        return ya;
    }
    ya + (yb - ya) * ((x - xa) / (xb - xa))
}

/// Reads a two-column numeric CSV by header names.
pub(crate) fn read_pairs(path: &Path, x_col: &str, y_col: &str) -> Result<Vec<(f64, f64)>> {
    let shown = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| Error::ingestion(&shown, 0, e.to_string()))?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::ingestion(&shown, 0, format!("no column named `{name}`")))
    };
    let (xi, yi) = (find(x_col)?, find(y_col)?);
    let mut out = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::ingestion(&shown, row, e.to_string()))?;
        let parse = |idx: usize| -> Result<f64> {
            let raw = rec.get(idx).unwrap_or("");
            raw.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::ingestion(&shown, row, format!("unparseable value `{raw}`")))
        };
        out.push((parse(xi)?, parse(yi)?));
    }
    if out.is_empty() {
        return Err(Error::ingestion(&shown, 1, "no data rows"));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProducerKind {
    Solar,
    Wind,
    #[default]
    Other,
}

/// Something that reports a non-negative power output at each step.
pub trait Producer: Send {
    fn kind(&self) -> ProducerKind;

    fn power_w(&self, t: Timestamp) -> Result<Sample>;
}

/// Replays a pre-generated power profile in watts.
pub struct TraceProducer {
    trace: Trace,
    kind: ProducerKind,
}

impl TraceProducer {
    pub fn new(trace: Trace, kind: ProducerKind) -> Self {
        TraceProducer { trace, kind }
    }
}

impl Producer for TraceProducer {
    fn kind(&self) -> ProducerKind {
        self.kind
    }

    fn power_w(&self, t: Timestamp) -> Result<Sample> {
        let s = self.trace.sample(t)?;
        if s.value < 0.0 {
            return Err(Error::input(format!(
                "trace `{}` yields negative power {} W at {t}",
                self.trace.name(),
                s.value
            )));
        }
        Ok(s)
    }
}

pub struct SolarProducer {
    irradiance: Trace,
    spec: SolarPanelSpec,
}

impl SolarProducer {
    pub fn new(irradiance: Trace, spec: SolarPanelSpec) -> Self {
        SolarProducer { irradiance, spec }
    }
}

impl Producer for SolarProducer {
    fn kind(&self) -> ProducerKind {
        ProducerKind::Solar
    }

    fn power_w(&self, t: Timestamp) -> Result<Sample> {
        let s = self.irradiance.sample(t)?;
        Ok(Sample {
            value: solar_power(s.value, &self.spec)?,
            stale: s.stale,
        })
    }
}

pub struct WindProducer {
    wind_speed: Trace,
    spec: WindTurbineSpec,
}

impl WindProducer {
    pub fn new(wind_speed: Trace, spec: WindTurbineSpec) -> Self {
        WindProducer { wind_speed, spec }
    }
}

impl Producer for WindProducer {
    fn kind(&self) -> ProducerKind {
        ProducerKind::Wind
    }

    fn power_w(&self, t: Timestamp) -> Result<Sample> {
        let s = self.wind_speed.sample(t)?;
        Ok(Sample {
            value: wind_power(s.value, &self.spec)?,
            stale: s.stale,
        })
    }
}
