use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::metrics;
use crate::nn::Network;
use crate::plasticity::ScaleReport;
use crate::scalar::Scalar;

use super::ProtocolKind;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleSummary {
    pub min_factor: f64,
    pub max_factor: f64,
    pub output_scale: f64,
}

impl From<&ScaleReport> for ScaleSummary {
    fn from(r: &ScaleReport) -> Self {
        Self {
            min_factor: r.min_factor(),
            max_factor: r.max_factor(),
            output_scale: r.output_scale,
        }
    }
}

/// One logged observation, normally the end of an epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run_id: String,
    pub protocol: ProtocolKind,
    pub method: String,
    /// Sub-run: `main`, `scratch`, `proportional` or `naive`.
    pub arm: String,
    pub seed: u64,
    /// Phase or stage, counted from 1.
    pub stage: usize,
    /// Epoch within the whole run, counted from 0.
    pub epoch: usize,
    pub train_loss: Option<f64>,
    pub test_acc: f64,
    pub lr: f64,
    pub weight_norms: Vec<f64>,
    pub init_norms: Vec<f64>,
    pub balance_mean: f64,
    pub balance_max: f64,
    pub lipschitz_bound: f64,
    pub scale: Option<ScaleSummary>,
    /// Scaling magnitude, for rescaling-robustness rows.
    pub magnitude: Option<f64>,
}

pub(crate) struct RecordContext<'a> {
    pub run_id: &'a str,
    pub protocol: ProtocolKind,
    pub method: &'a str,
    pub seed: u64,
}

impl RecordContext<'_> {
    #[allow(clippy::too_many_arguments)]
    pub fn record<T: Scalar>(
        &self,
        net: &Network<T>,
        arm: &str,
        stage: usize,
        epoch: usize,
        train_loss: Option<f64>,
        test_acc: f64,
        lr: f64,
        scale: Option<&ScaleReport>,
        magnitude: Option<f64>,
    ) -> Result<RunRecord> {
        let norms = net.weight_norms();
        let balance = metrics::balance_summary(net).unwrap_or_default();
        Ok(RunRecord {
            run_id: self.run_id.to_string(),
            protocol: self.protocol,
            method: self.method.to_string(),
            arm: arm.to_string(),
            seed: self.seed,
            stage,
            epoch,
            train_loss,
            test_acc,
            lr,
            weight_norms: norms.iter().map(|n| n.current.as_f64()).collect(),
            init_norms: norms.iter().map(|n| n.init.as_f64()).collect(),
            balance_mean: balance.mean,
            balance_max: balance.max,
            lipschitz_bound: metrics::lipschitz_upper_bound(net).value,
            scale: scale.map(ScaleSummary::from),
            magnitude,
        })
    }
}
