use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bodymodel::{model_forward, BodyParams, ModelTemplate, Taxon};
use crate::camera::project;
use crate::datagen::{Dataset, LoadedRecord};
use crate::error::Result;
use crate::metrics::{GeometryPair, MetricsAccumulator, MetricsReport, SampleEvaluation};
use crate::network::{predict, NetworkConfig, NetworkState, PredictedParams};

/// Metrics over a dataset, overall and per taxon.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub overall: MetricsReport,
    pub per_taxon: BTreeMap<String, MetricsReport>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "[overall]\n{}", self.overall.to_table());
        for (t, r) in &self.per_taxon {
            let _ = writeln!(out, "[{t}]\n{}", r.to_table());
        }
        out.trim_end().to_string()
    }
}

/// Ground-truth parameters dressed as a network prediction.
pub fn oracle_prediction(record: &LoadedRecord) -> PredictedParams {
    PredictedParams {
        beta: record.params.beta.clone(),
        theta: record.params.theta.clone(),
        alpha: record.params.alpha.clone(),
        camera: record.camera.translation,
        z: Vec::new(),
    }
}

/// Poses the predicted body (γ = 0, placed by the predicted camera
/// translation) and pairs it with the record's annotations.
pub fn sample_evaluation(record: &LoadedRecord, template: &ModelTemplate, pred: &PredictedParams) -> Result<SampleEvaluation> {
    let params = BodyParams { beta: pred.beta.clone(), theta: pred.theta.clone(), alpha: pred.alpha.clone(), gamma: [0.0; 3] };
    let mesh = model_forward(template, &params)?;
    let camera = record.camera.with_translation(pred.camera);
    let pred_keypoints2d = project(&mesh.keypoints3d, &camera)?.pixels;
    let geometry = if record.has_3d {
        let gt = model_forward(template, &record.params)?;
        Some(GeometryPair { pred_joints: mesh.keypoints3d, gt_joints: record.keypoints3d.clone(), pred_vertices: mesh.vertices, gt_vertices: gt.vertices })
    } else {
        None
    };
    Ok(SampleEvaluation {
        geometry,
        pred_keypoints2d,
        gt_keypoints2d: record.keypoints2d.clone(),
        visible: record.visible.clone(),
        mask_area: record.mask_tensor().data().iter().filter(|&&v| v > 0.5).count(),
        head_tail: template.head_tail,
    })
}

/// Scores `predictions[i]` against `dataset.records[i]`.
pub fn evaluate_predictions(dataset: &Dataset, predictions: &[PredictedParams]) -> Result<EvaluationReport> {
    if predictions.len() != dataset.records.len() {
        return Err(crate::error::invalid!("{} predictions for {} records", predictions.len(), dataset.records.len()));
    }
    let evals: Vec<SampleEvaluation> =
        dataset.records.par_iter().zip(predictions).map(|(r, p)| sample_evaluation(r, dataset.template(r.taxon)?, p)).collect::<Result<_>>()?;
    let mut overall = MetricsAccumulator::new();
    let mut per: BTreeMap<Taxon, MetricsAccumulator> = BTreeMap::new();
    for (r, e) in dataset.records.iter().zip(&evals) {
        overall.add(e)?;
        per.entry(r.taxon).or_default().add(e)?;
    }
    Ok(EvaluationReport { overall: overall.finish(), per_taxon: per.into_iter().map(|(t, a)| (t.name().to_string(), a.finish())).collect() })
}

/// Taxon-routed inference on every record, then [`evaluate_predictions`].
pub fn evaluate_model(state: &NetworkState, config: &NetworkConfig, dataset: &Dataset) -> Result<EvaluationReport> {
    let predictions: Vec<PredictedParams> = dataset.records.par_iter().map(|r| predict(state, config, &r.image, r.taxon)).collect::<Result<_>>()?;
    evaluate_predictions(dataset, &predictions)
}
