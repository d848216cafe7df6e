//! Frame encoding, the trainable detector bundle and its training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::detect::{assign_targets, decode_predictions, make_anchors, total_loss, AnchorSet, DetectConfig, DetectionSet, LossParams, TargetAssignment};
use crate::error::{Error, Result};
use crate::geometry::CalibrationSet;
use crate::nnet::{
    adam_step, model_backward_with, model_forward, read_checkpoint, write_checkpoint, AdamState, BackwardOptions,
    ModelConfig, ModelWeights, Param, TensorF, TrainConfig,
};
use crate::radar_io::RadarPointCloud;
use crate::spg::{assemble_spg, GridSpec, NormConfig, SemanticSource, SpgTensor};
use crate::synthgen::{Dataset, VEHICLE_CLASS};

/// Normalized SPG for one frame; `semantics: None` leaves the semantic
/// channels at zero.
pub fn encode_frame(
    cloud: &RadarPointCloud,
    semantics: Option<&dyn SemanticSource>,
    calib: &CalibrationSet,
    grid: &GridSpec,
) -> Result<SpgTensor> {
    assemble_spg(cloud, semantics, calib, grid, &NormConfig::for_grid(grid))
}

pub fn spg_to_input(t: &SpgTensor) -> TensorF<f32> {
    TensorF::from_vec(&[1, t.channels(), t.height(), t.width()], t.data.clone()).expect("SPG tensor shape")
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

/// Network weights together with everything needed to turn a frame into
/// detections.
#[derive(Clone, Debug)]
pub struct Detector {
    pub weights: ModelWeights<f32>,
    pub anchors: AnchorSet,
    pub detect: DetectConfig,
    /// Whether the semantic channels are filled at encode time.
    pub use_semantics: bool,
}

impl Detector {
    /// Stored settings are rounded to `f32` up front so a detector behaves the
    /// same before and after a checkpoint round trip.
    pub fn new(weights: ModelWeights<f32>, mut anchors: AnchorSet, mut detect: DetectConfig, use_semantics: bool) -> Self {
        anchors.base_size = (round_f32(anchors.base_size.0), round_f32(anchors.base_size.1));
        anchors.orientations.iter_mut().for_each(|a| *a = round_f32(*a));
        let g = &mut anchors.grid;
        g.x_range = g.x_range.map(round_f32);
        g.z_range = g.z_range.map(round_f32);
        g.height_edges.iter_mut().for_each(|e| *e = round_f32(*e));
        detect.orientations = anchors.orientations.clone();
        detect.score_thresh = round_f32(detect.score_thresh);
        detect.nms_iou = round_f32(detect.nms_iou);
        Self {
            weights,
            anchors,
            detect,
            use_semantics,
        }
    }

    pub fn grid(&self) -> &GridSpec {
        &self.anchors.grid
    }

    pub fn encode(
        &self,
        cloud: &RadarPointCloud,
        semantics: Option<&dyn SemanticSource>,
        calib: &CalibrationSet,
    ) -> Result<SpgTensor> {
        let sem = if self.use_semantics { semantics } else { None };
        encode_frame(cloud, sem, calib, self.grid())
    }

    pub fn detect(&self, spg: &SpgTensor) -> Result<DetectionSet> {
        let (heads, _) = model_forward(&spg_to_input(spg), &self.weights)?;
        Ok(decode_predictions(&heads, 0, &self.anchors, &self.detect, VEHICLE_CLASS))
    }

    pub fn to_checkpoint(&self) -> Vec<u8> {
        let c = self.weights.config();
        let g = self.grid();
        let meta = |name: &str, data: Vec<f64>| Param {
            name: name.into(),
            shape: vec![data.len()],
            data: data.into_iter().map(|v| v as f32).collect(),
        };
        let mut params = self.weights.params().to_vec();
        let mut model = vec![c.in_channels as f64, c.stages as f64, c.convs_per_stage as f64, c.anchors_per_cell as f64];
        model.extend(c.widths.iter().map(|&w| w as f64));
        params.push(meta("meta.model", model));
        let mut grid = vec![g.x_range[0], g.x_range[1], g.z_range[0], g.z_range[1], g.cells_x as f64, g.cells_z as f64];
        grid.extend(&g.height_edges);
        params.push(meta("meta.grid", grid));
        let mut anchors = vec![self.anchors.base_size.0, self.anchors.base_size.1];
        anchors.extend(&self.anchors.orientations);
        params.push(meta("meta.anchors", anchors));
        params.push(meta(
            "meta.detect",
            vec![self.detect.score_thresh, self.detect.nms_iou, self.use_semantics as u8 as f64],
        ));
        write_checkpoint(&params)
    }

    pub fn from_checkpoint(bytes: &[u8]) -> Result<Self> {
        let params = read_checkpoint(bytes)?;
        let meta = |name: &str| -> Result<Vec<f64>> {
            params
                .iter()
                .find(|p| p.name == name)
                .map(|p| p.data.iter().map(|&v| v as f64).collect())
                .ok_or_else(|| Error::Format(format!("checkpoint lacks '{name}'")))
        };
        let m = meta("meta.model")?;
        if m.len() < 5 {
            return Err(Error::Format("meta.model is too short".into()));
        }
        let config = ModelConfig {
            in_channels: m[0] as usize,
            stages: m[1] as usize,
            convs_per_stage: m[2] as usize,
            anchors_per_cell: m[3] as usize,
            widths: m[4..].iter().map(|&w| w as usize).collect(),
        };
        config.validate()?;
        let g = meta("meta.grid")?;
        if g.len() < 8 {
            return Err(Error::Format("meta.grid is too short".into()));
        }
        let grid = GridSpec {
            x_range: [g[0], g[1]],
            z_range: [g[2], g[3]],
            cells_x: g[4] as usize,
            cells_z: g[5] as usize,
            height_edges: g[6..].to_vec(),
        };
        grid.validate()?;
        let a = meta("meta.anchors")?;
        let d = meta("meta.detect")?;
        if a.len() != 2 + config.anchors_per_cell || d.len() != 3 {
            return Err(Error::Format("anchor or detection settings do not match the model".into()));
        }
        let weights = ModelWeights::from_params(&config, params.iter().filter(|p| !p.name.starts_with("meta.")).cloned().collect())?;
        let anchors = AnchorSet {
            grid,
            base_size: (a[0], a[1]),
            orientations: a[2..].to_vec(),
        };
        let detect = DetectConfig {
            orientations: anchors.orientations.clone(),
            score_thresh: d[0],
            nms_iou: d[1],
        };
        Ok(Self::new(weights, anchors, detect, d[2] != 0.0))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainOptions {
    pub train: TrainConfig,
    pub loss: LossParams,
    pub detect: DetectConfig,
    pub use_semantics: bool,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            train: TrainConfig::default(),
            loss: LossParams::default(),
            detect: DetectConfig::default(),
            use_semantics: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: usize,
    pub loss: f64,
    pub focal: f64,
    pub smooth_l1: f64,
}

pub fn loss_log_csv(records: &[LossRecord]) -> Vec<u8> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(["step", "loss", "focal", "smooth_l1"]).expect("header writes");
    for r in records {
        w.serialize(r).expect("loss record serializes");
    }
    w.into_inner().expect("in-memory writer")
}

/// Encoded inputs and anchor targets of the training frames.
pub struct TrainingSet {
    pub inputs: Vec<Vec<f32>>,
    pub targets: Vec<TargetAssignment>,
    pub anchors: AnchorSet,
}

pub fn prepare_training_set(ds: &Dataset, frames: &[usize], opts: &TrainOptions, jobs: usize) -> Result<TrainingSet> {
    if frames.is_empty() {
        return Err(Error::Validation("training needs at least one frame".into()));
    }
    let labels: Vec<_> = frames.iter().flat_map(|&i| ds.frames[i].labels.iter().copied()).collect();
    let anchors = make_anchors(&ds.grid, &labels, &opts.detect.orientations)?;
    // same rounding as the stored detector, so targets match inference
    let anchors = Detector::new(ModelWeights::zeros(&opts.train.model)?, anchors, opts.detect.clone(), opts.use_semantics).anchors;
    let encoded = crate::parallel_map(frames.len(), jobs, |k| {
        let f = &ds.frames[frames[k]];
        let sem: Option<&dyn SemanticSource> = if opts.use_semantics { Some(&f.mask) } else { None };
        let spg = encode_frame(&f.cloud, sem, &ds.calib, &anchors.grid)?;
        Ok((spg.data, assign_targets(&anchors, &f.labels, &opts.loss)))
    })?;
    let (inputs, targets) = encoded.into_iter().unzip();
    Ok(TrainingSet { inputs, targets, anchors })
}

/// Adam training on seeded, per-epoch shuffled mini-batches. Single-threaded,
/// so the result depends only on the data and the options.
pub fn train_detector(
    set: &TrainingSet,
    opts: &TrainOptions,
    mut on_step: impl FnMut(&LossRecord),
) -> Result<(Detector, Vec<LossRecord>)> {
    opts.train.validate()?;
    opts.loss.validate()?;
    let cfg = &opts.train;
    let mut weights = ModelWeights::<f32>::init(&cfg.model, cfg.seed)?;
    let mut adam = AdamState::new(&weights);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7472_6169_6e);
    let g = &set.anchors.grid;
    let (c, h, w) = (cfg.model.in_channels, g.cells_x, g.cells_z);
    let batch = cfg.batch_size.min(set.inputs.len());
    let mut order: Vec<usize> = Vec::new();
    let mut log = Vec::with_capacity(cfg.max_steps);
    let no_input_grad = BackwardOptions::default();
    for step in 0..cfg.max_steps {
        if order.len() < batch {
            let mut epoch: Vec<usize> = (0..set.inputs.len()).collect();
            epoch.shuffle(&mut rng);
            order = epoch;
        }
        let picks: Vec<usize> = order.drain(..batch).collect();
        let mut data = Vec::with_capacity(batch * c * h * w);
        for &i in &picks {
            data.extend_from_slice(&set.inputs[i]);
        }
        let x = TensorF::from_vec(&[batch, c, h, w], data)?;
        let (heads, cache) = model_forward(&x, &weights)?;
        let targets: Vec<&TargetAssignment> = picks.iter().map(|&i| &set.targets[i]).collect();
        let r = total_loss(&heads, &targets, &opts.loss)?;
        let grads = model_backward_with(&r.grads, &cache, &weights, &no_input_grad)?;
        adam_step(&mut weights, &grads.params, &mut adam, cfg)?;
        let rec = LossRecord {
            step,
            loss: r.total,
            focal: r.focal,
            smooth_l1: r.smooth_l1,
        };
        on_step(&rec);
        log.push(rec);
    }
    let det = Detector::new(weights, set.anchors.clone(), opts.detect.clone(), opts.use_semantics);
    Ok((det, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate_dataset, SceneConfig};

    fn small() -> (Dataset, TrainOptions) {
        let ds = generate_dataset(&SceneConfig::default(), &GridSpec::with_cells(32), 4, 1).unwrap();
        let mut opts = TrainOptions::default();
        opts.train.model = ModelConfig {
            stages: 2,
            widths: vec![8, 8, 8],
            ..ModelConfig::default()
        };
        opts.train.max_steps = 3;
        (ds, opts)
    }

    #[test]
    fn zero_steps_keeps_initialization() {
        let (ds, mut opts) = small();
        opts.train.max_steps = 0;
        let set = prepare_training_set(&ds, &[0, 1, 2, 3], &opts, 1).unwrap();
        let (det, log) = train_detector(&set, &opts, |_| {}).unwrap();
        assert!(log.is_empty());
        let init = ModelWeights::<f32>::init(&opts.train.model, opts.train.seed).unwrap();
        assert_eq!(det.weights.params(), init.params());
    }

    #[test]
    fn checkpoint_round_trip_preserves_detections() {
        let (ds, opts) = small();
        let set = prepare_training_set(&ds, &[0, 1, 2, 3], &opts, 1).unwrap();
        let (det, log) = train_detector(&set, &opts, |_| {}).unwrap();
        assert_eq!(log.len(), 3);
        let bytes = det.to_checkpoint();
        let back = Detector::from_checkpoint(&bytes).unwrap();
        assert_eq!(back.to_checkpoint(), bytes);
        assert_eq!(back.anchors, det.anchors);
        let f = &ds.frames[0];
        let spg = det.encode(&f.cloud, Some(&f.mask), &ds.calib).unwrap();
        assert_eq!(back.detect(&spg).unwrap(), det.detect(&spg).unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (ds, opts) = small();
        let set = prepare_training_set(&ds, &[0, 1, 2, 3], &opts, 2).unwrap();
        let a = train_detector(&set, &opts, |_| {}).unwrap();
        let b = train_detector(&set, &opts, |_| {}).unwrap();
        assert_eq!(a.0.to_checkpoint(), b.0.to_checkpoint());
        assert_eq!(loss_log_csv(&a.1), loss_log_csv(&b.1));
        assert!(String::from_utf8(loss_log_csv(&a.1)).unwrap().starts_with("step,loss,focal,smooth_l1\n"));
    }
}
