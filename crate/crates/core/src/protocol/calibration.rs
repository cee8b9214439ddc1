//! The `paper-calibration` link profile.
//!
//! Two published baseline figures fix the two unknowns: the time the client
//! aggregator spends receiving model halves fixes the link bandwidth, and the
//! baseline's total at the anchor size then fixes its per-client training
//! traffic. The two-server scheme is never consulted; its latency under the
//! resulting profile is the cross-check.

use serde::Serialize;

use super::{run_scheme, uniform_shapes, ClientShape, Clients, ExecMode, Scheme, SchemeConfig, TrafficModel};
use crate::error::Result;
use crate::netsim::{bisect, ComputeModel, LinkModel, RoundReport};
use crate::neural::{build_network, ModelParams, TrainConfig};
use crate::transcript::Phase;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Anchors {
    pub n: usize,
    /// Baseline round latency at `n`, seconds.
    pub ariann_total_s: f64,
    /// Share of it spent on model-half upload to the aggregator, seconds.
    pub ariann_upload_s: f64,
    /// Bytes of data each client holds.
    pub data_bytes: u64,
}

impl Default for Anchors {
    fn default() -> Self {
        Anchors {
            n: 10_000,
            ariann_total_s: 1123.0,
            ariann_upload_s: 90.0,
            data_bytes: 450_000,
        }
    }
}

/// Targets the cross-check compares against.
pub const FUSEFL_TOTAL_S: f64 = 45.21;
pub const FUSEFL_C2C_S: f64 = 0.21;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Calibration {
    pub anchors: Anchors,
    pub link: LinkModel,
    /// Online bytes of one pass over one client's data, both directions.
    pub online_bytes_per_dataset: u64,
}

/// 784-pixel, 10-class rows, one 8-byte ring element per value.
const ROW_BYTES: u64 = (784 + 10) * 8;

pub fn calibration_model() -> Result<ModelParams> {
    build_network("network1", &[784], 0)
}

pub fn anchor_shape(a: &Anchors) -> ClientShape {
    ClientShape {
        rows: (a.data_bytes / ROW_BYTES).max(1) as usize,
        share_bytes: a.data_bytes,
    }
}

fn base_config(scheme: Scheme, n: usize, online_bytes: u64) -> SchemeConfig {
    SchemeConfig {
        scheme,
        n_clients: n,
        mode: ExecMode::MeterOnly,
        traffic: TrafficModel::PerDataset { online_bytes },
        train: TrainConfig {
            global_epochs: 1,
            local_epochs: 1,
            ..TrainConfig::default()
        },
        ..SchemeConfig::default()
    }
}

/// One metering round of `scheme` at size `n` under a calibration.
pub fn meter(c: &Calibration, model: &ModelParams, scheme: Scheme, n: usize) -> Result<RoundReport> {
    let shapes = uniform_shapes(n, anchor_shape(&c.anchors).rows, c.anchors.data_bytes);
    let out = run_scheme(&base_config(scheme, n, c.online_bytes_per_dataset), model, Clients::Shapes(&shapes), None, None)?;
    Ok(out.rounds[0].report(&c.link, &ComputeModel::default()))
}

/// Model distribution is left out: the published figures count only the
/// traffic of training and of returning model halves.
fn profile(bandwidth: f64) -> LinkModel {
    LinkModel {
        charge_distribution: false,
        ..LinkModel::uniform(bandwidth)
    }
}

pub fn calibrate(anchors: Anchors) -> Result<Calibration> {
    let model = calibration_model()?;
    let shapes = uniform_shapes(anchors.n, anchor_shape(&anchors).rows, anchors.data_bytes);
    let transcript_for = |online: u64| -> Result<crate::transcript::Transcript> {
        let out = run_scheme(&base_config(Scheme::AriannFl, anchors.n, online), &model, Clients::Shapes(&shapes), None, None)?;
        Ok(out.rounds.into_iter().next().expect("one round").transcript)
    };
    let compute = ComputeModel::default();

    let t0 = transcript_for(0)?;
    let bandwidth = bisect(1e3, 1e13, anchors.ariann_upload_s, 1e-13, |b| {
        Ok(crate::netsim::report(&t0, &profile(b), &compute).phase_time(Phase::Upload))
    })?;
    let link = profile(bandwidth);
    let online = bisect(0.0, 1e10, anchors.ariann_total_s, 1e-13, |t| {
        Ok(crate::netsim::charge_transcript(&transcript_for(t.round() as u64)?, &link).latency_s)
    })?;
    Ok(Calibration {
        anchors,
        link,
        online_bytes_per_dataset: online.round() as u64,
    })
}

pub fn paper_calibration() -> Result<Calibration> {
    calibrate(Anchors::default())
}
