//! End-to-end latency of a classified sample.
//!
//! A sample that stops at device exit `i` pays the device compute up to that
//! exit. An offloaded sample pays every device segment, the upload of the
//! partition-layer tensor, and the cloud compute. Result download is not
//! modelled.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cascade::ExitDecision;
use crate::error::{Error, Result};

/// One megabit per second, in bits per second.
pub const MBPS: f64 = 1e6;

fn default_element_bytes() -> u32 {
    4
}

/// Latency parameters of a device/cloud deployment. Times in seconds, sizes
/// in bytes, rate in bits per second.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LatencyProfile {
    /// `device_segment_delays[i]` is the compute between exit `i` and exit
    /// `i + 1` (1-based exits; exit 0 is the input), branch overhead included.
    pub device_segment_delays: Vec<f64>,
    /// Size of the tensor uploaded when a sample is offloaded.
    pub partition_output_bytes: u64,
    pub uplink_rate_bps: f64,
    /// Cloud compute for the layers after the partition point.
    pub cloud_delay_s: f64,
    /// Bytes per tensor element, used by [`LatencyProfile::tensor_bytes`].
    #[serde(default = "default_element_bytes")]
    pub element_bytes: u32,
}

impl LatencyProfile {
    /// Illustrative single-branch deployment: 8 ms of device compute up to
    /// the side branch, a 64x15x15 float tensor over an 18.8 Mbps uplink, and
    /// 2 ms in the cloud. These are not measured values.
    pub fn illustrative() -> Self {
        Self {
            device_segment_delays: vec![0.008],
            partition_output_bytes: 64 * 15 * 15 * 4,
            uplink_rate_bps: 18.8 * MBPS,
            cloud_delay_s: 0.002,
            element_bytes: 4,
        }
    }

    /// Illustrative two-branch deployment: a second device segment of 7 ms,
    /// a smaller 192x7x7 partition tensor and 1.5 ms of remaining cloud work.
    pub fn illustrative_two_branch() -> Self {
        Self {
            device_segment_delays: vec![0.008, 0.007],
            partition_output_bytes: 192 * 7 * 7 * 4,
            uplink_rate_bps: 18.8 * MBPS,
            cloud_delay_s: 0.0015,
            element_bytes: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.device_segment_delays.is_empty() {
            return Err(Error::arg(
                "latency profile needs at least one device segment",
            ));
        }
        if let Some(d) = self
            .device_segment_delays
            .iter()
            .chain(std::iter::once(&self.cloud_delay_s))
            .find(|d| !(d.is_finite() && **d >= 0.0))
        {
            return Err(Error::arg(format!("delay {d} must be non-negative")));
        }
        if self.uplink_rate_bps.is_nan() || self.uplink_rate_bps <= 0.0 {
            return Err(Error::arg(format!(
                "uplink rate {} must be positive",
                self.uplink_rate_bps
            )));
        }
        Ok(())
    }

    /// Number of exits hosted on the device.
    pub fn device_exits(&self) -> usize {
        self.device_segment_delays.len()
    }

    /// Byte size of a tensor with the given element count.
    pub fn tensor_bytes(&self, elements: u64) -> u64 {
        elements * u64::from(self.element_bytes)
    }

    /// Loads a profile from a `.toml` or `.json` file.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let profile: Self = match path.extension().and_then(|e| e.to_str()) {
            Some("json") => serde_json::from_str(&text)
                .map_err(|e| Error::arg(format!("{}: {e}", path.display())))?,
            _ => {
                toml::from_str(&text).map_err(|e| Error::arg(format!("{}: {e}", path.display())))?
            }
        };
        profile.validate()?;
        Ok(profile)
    }
}

impl Default for LatencyProfile {
    fn default() -> Self {
        Self::illustrative()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyBreakdown {
    pub device_s: f64,
    pub comm_s: f64,
    pub cloud_s: f64,
    /// Always `device_s + comm_s + cloud_s`, summed in that order.
    pub total_s: f64,
}

impl LatencyBreakdown {
    fn new(device_s: f64, comm_s: f64, cloud_s: f64) -> Self {
        Self {
            device_s,
            comm_s,
            cloud_s,
            total_s: device_s + comm_s + cloud_s,
        }
    }
}

/// Upload time of `payload_bytes` at `uplink_rate_bps`.
pub fn comm_delay(payload_bytes: u64, uplink_rate_bps: f64) -> Result<f64> {
    if uplink_rate_bps.is_nan() || uplink_rate_bps <= 0.0 {
        return Err(Error::arg(format!(
            "uplink rate {uplink_rate_bps} must be positive"
        )));
    }
    Ok(8.0 * payload_bytes as f64 / uplink_rate_bps)
}

pub fn sample_latency(
    decision: &ExitDecision,
    profile: &LatencyProfile,
) -> Result<LatencyBreakdown> {
    let d = profile.device_exits();
    if decision.exit_index == 0 || decision.on_device != (decision.exit_index <= d) {
        return Err(Error::DimensionMismatch(format!(
            "decision at exit {} (on_device={}) does not match a profile with {d} device exits",
            decision.exit_index, decision.on_device
        )));
    }
    if decision.on_device {
        let device: f64 = profile.device_segment_delays[..decision.exit_index]
            .iter()
            .sum();
        return Ok(LatencyBreakdown::new(device, 0.0, 0.0));
    }
    let device: f64 = profile.device_segment_delays.iter().sum();
    let comm = comm_delay(profile.partition_output_bytes, profile.uplink_rate_bps)?;
    Ok(LatencyBreakdown::new(device, comm, profile.cloud_delay_s))
}

/// How per-sample totals combine into one batch time.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Sum,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Aggregation::Mean),
            "sum" => Ok(Aggregation::Sum),
            other => Err(Error::arg(format!("unknown aggregation {other:?}"))),
        }
    }
}

pub fn batch_time(
    decisions: &[ExitDecision],
    profile: &LatencyProfile,
    aggregation: Aggregation,
) -> Result<f64> {
    if decisions.is_empty() {
        return Err(Error::Empty("batch"));
    }
    let mut sum = 0.0;
    for d in decisions {
        sum += sample_latency(d, profile)?.total_s;
    }
    Ok(match aggregation {
        Aggregation::Mean => sum / decisions.len() as f64,
        Aggregation::Sum => sum,
    })
}
