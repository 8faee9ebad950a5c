//! The multi-task network: backbone, neck, shared encoder, task heads, and
//! optional prompt fusion.

pub mod backbone;
pub mod batch;
pub mod checkpoint;
pub mod config;
pub mod detection;
pub mod encoder;
pub mod hungarian;
pub mod layers;
pub mod optim;
pub mod params;
pub mod segmentation;

use candle_core::{Tensor, Var};

pub use backbone::{
    Backbone, ConvBackbone, Fpn, NeckFeatures, Pyramid, NECK_STRIDES, PYRAMID_STRIDES,
};
pub use batch::Batch;
pub use config::{MatcherConfig, ModelConfig};
pub use detection::{DetTarget, DetectionHead, DetectionOutput};
pub use encoder::{
    flatten_with_pos, EnhancedFeatures, FlattenedSequence, PositionalEncoding, SharedEncoder,
};
pub use optim::{AdamW, OptimizerConfig};
pub use params::{Builder, Init, ParamStore};
pub use segmentation::SegHead;

use crate::balancing::{GradScope, TaskLosses};
use crate::error::{Error, Result};
use crate::prompting::{PostHeadBlock, PreHeadBlock, PromptBank, PromptConfig};
use crate::tasks::{PerTask, TaskKind, TaskSet};

/// A head's output together with the batch rows it was computed for.
#[derive(Debug, Clone)]
pub struct HeadOutput<T> {
    pub rows: Vec<usize>,
    pub out: T,
}

#[derive(Debug, Clone, Default)]
pub struct ModelOutput {
    pub det: Option<HeadOutput<DetectionOutput>>,
    /// Pixel-task logits `(n, C, H, W)`, indexed by task; `Det` is unused.
    pub seg: PerTask<Option<HeadOutput<Tensor>>>,
}

#[derive(Debug, Clone)]
pub struct MultiTaskModel {
    pub cfg: ModelConfig,
    pub prompt_cfg: PromptConfig,
    heads: TaskSet,
    store: ParamStore,
    backbone: ConvBackbone,
    neck: Fpn,
    posenc: PositionalEncoding,
    encoder: SharedEncoder,
    det: Option<DetectionHead>,
    seg: PerTask<Option<SegHead>>,
    pre: PerTask<Option<PreHeadBlock>>,
    post: Option<PostHeadBlock>,
}

fn select(t: &Tensor, rows: &[usize]) -> Result<Tensor> {
    let b = t.dim(0)?;
    if rows.len() == b && rows.iter().enumerate().all(|(i, &r)| i == r) {
        return Ok(t.clone());
    }
    let idx: Vec<u32> = rows.iter().map(|&r| r as u32).collect();
    Ok(t.index_select(&Tensor::new(idx.as_slice(), t.device())?, 0)?)
}

fn select_neck(n: &NeckFeatures, rows: &[usize]) -> Result<NeckFeatures> {
    let p = [0, 1, 2, 3, 4].map(|i| select(&n.p[i], rows));
    let [a, b, c, d, e] = p;
    Ok(NeckFeatures {
        p: [a?, b?, c?, d?, e?],
    })
}

impl MultiTaskModel {
    pub fn new(
        cfg: ModelConfig,
        prompt_cfg: PromptConfig,
        heads: TaskSet,
        store: ParamStore,
    ) -> Result<Self> {
        cfg.validate()?;
        prompt_cfg.validate()?;
        if heads.is_empty() {
            return Err(Error::Config("model needs at least one task head".into()));
        }
        let root = store.root();
        let d = cfg.d_model;
        let backbone = ConvBackbone::new(&root.pp("backbone"), cfg.backbone_widths)?;
        let neck = Fpn::new(&root.pp("neck"), backbone.out_channels(), d, cfg.neck_bias)?;
        let posenc = PositionalEncoding::new(&root.pp("posenc"), d)?;
        let encoder = SharedEncoder::new(
            &root.pp("encoder"),
            d,
            cfg.encoder_depth,
            cfg.encoder_heads,
            cfg.ffn_hidden,
        )?;
        let det = if heads.contains(TaskKind::Det) {
            Some(DetectionHead::new(
                &root.pp("det"),
                d,
                cfg.encoder_heads,
                cfg.ffn_hidden,
                cfg.decoder_layers,
                cfg.num_queries,
                TaskKind::Det.num_categories(),
            )?)
        } else {
            None
        };
        let mut seg = PerTask::<Option<SegHead>>::default();
        for t in heads.iter().filter(|t| t.is_pixel_task()) {
            seg[t] = Some(SegHead::new(
                &root.pp(format!("seg.{t}")),
                d,
                cfg.seg_dim,
                t.seg_channels(),
            )?);
        }
        let mut pre = PerTask::<Option<PreHeadBlock>>::default();
        let mut post = None;
        if prompt_cfg.enabled {
            let pd = prompt_cfg.dim();
            for t in heads.iter() {
                root.get(
                    &format!("prompt.{t}"),
                    &[t.num_categories(), pd],
                    Init::Zeros,
                )?;
                if prompt_cfg.uses_pre() {
                    pre[t] = Some(PreHeadBlock::new(
                        &root.pp(format!("prompt_pre.{t}")),
                        pd,
                        d,
                        cfg.encoder_heads,
                        cfg.ffn_hidden,
                        prompt_cfg.zero_residual,
                    )?);
                }
            }
            if prompt_cfg.uses_post() && heads.contains(TaskKind::Det) {
                post = Some(PostHeadBlock::new(
                    &root.pp("prompt_post.det"),
                    pd,
                    d,
                    cfg.encoder_heads,
                    cfg.ffn_hidden,
                    TaskKind::Det.num_categories(),
                )?);
            }
            if !prompt_cfg.trainable {
                store.freeze("prompt");
            }
        }
        Ok(MultiTaskModel {
            cfg,
            prompt_cfg,
            heads,
            store,
            backbone,
            neck,
            posenc,
            encoder,
            det,
            seg,
            pre,
            post,
        })
    }

    pub fn heads(&self) -> TaskSet {
        self.heads
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    /// Current prompt rows for `task`, `(K, D)`.
    pub fn prompt(&self, task: TaskKind) -> Result<Tensor> {
        self.store
            .var(&format!("prompt.{task}"))
            .map(|v| v.as_tensor().clone())
            .ok_or_else(|| {
                Error::Config(format!(
                    "no prompt for {task}; prompting is off or the head is absent"
                ))
            })
    }

    /// Initialize the prompt parameters of `bank.meta.task` from a bank.
    pub fn load_prompt(&self, bank: &PromptBank) -> Result<()> {
        let t = bank.meta.task;
        let cur = self.prompt(t)?;
        let (k, d) = cur.dims2()?;
        if bank.meta.k != k || bank.meta.d != d {
            return Err(Error::Config(format!(
                "{t} bank is {}×{}, model expects {k}×{d}",
                bank.meta.k, bank.meta.d
            )));
        }
        self.store.set(
            &format!("prompt.{t}"),
            &bank.to_tensor(self.store.dtype(), &self.store.device())?,
        )
    }

    pub fn load_prompts_from(&self, dir: &std::path::Path) -> Result<()> {
        for t in self.heads.iter() {
            self.load_prompt(&PromptBank::load(dir, t)?)?;
        }
        Ok(())
    }

    /// Shared parameters a balancer differentiates against.
    pub fn scope_vars(&self, scope: GradScope) -> Vec<Var> {
        let prefixes: &[&str] = match scope {
            GradScope::LastP5 => &["neck.output5"],
            GradScope::ImageEncoder => &["backbone", "neck"],
            GradScope::SharedEncoder => &["backbone", "neck", "encoder", "posenc"],
        };
        prefixes
            .iter()
            .flat_map(|p| self.store.with_prefix(p))
            .collect()
    }

    /// Parameters owned by one task: its head and its prompt pathway.
    pub fn task_vars(&self, task: TaskKind) -> Vec<Var> {
        let head = match task {
            TaskKind::Det => "det".to_string(),
            t => format!("seg.{t}"),
        };
        let mut v = self.store.with_prefix(&head);
        v.extend(self.store.with_prefix(&format!("prompt.{task}")));
        v.extend(self.store.with_prefix(&format!("prompt_pre.{task}")));
        if task == TaskKind::Det {
            v.extend(self.store.with_prefix("prompt_post.det"));
        }
        v
    }

    pub fn neck_features(&self, images: &Tensor) -> Result<NeckFeatures> {
        backbone::check_input(images)?;
        self.neck.forward(&self.backbone.forward(images)?)
    }

    fn encode(&self, levels: &[(&Tensor, usize)]) -> Result<EnhancedFeatures> {
        self.encoder
            .forward(flatten_with_pos(levels, &self.posenc)?)
    }

    /// Run each task head on its `rows` of the batch. Heads with no rows are
    /// skipped entirely.
    pub fn forward(&self, images: &Tensor, rows: &PerTask<Vec<usize>>) -> Result<ModelOutput> {
        let (b, _, _) = backbone::check_input(images)?;
        for t in TaskKind::ALL {
            if rows[t].is_empty() {
                continue;
            }
            if !self.heads.contains(t) {
                return Err(Error::Config(format!(
                    "rows requested for {t}, which has no head"
                )));
            }
            if let Some(&r) = rows[t].iter().find(|&&r| r >= b) {
                return Err(Error::Shape(format!(
                    "row {r} out of range for batch of {b}"
                )));
            }
        }
        let neck = self.neck_features(images)?;
        let pre = self.prompt_cfg.uses_pre();
        let det_active = !rows[TaskKind::Det].is_empty();
        let seg_active = TaskKind::ALL[1..].iter().any(|&t| !rows[t].is_empty());
        let p = &neck.p;

        let plain = if (det_active || seg_active) && !pre {
            Some(self.encode(&[(&p[1], 0), (&p[2], 1), (&p[3], 2), (&p[4], 3)])?)
        } else {
            None
        };
        let seg_enc = if pre && seg_active {
            Some(self.encode(&[(&p[1], 0), (&p[2], 1), (&p[3], 2)])?)
        } else {
            None
        };

        let mut out = ModelOutput::default();
        if det_active {
            let r = &rows[TaskKind::Det];
            let head = self.det.as_ref().expect("checked above");
            let det_out = if let Some(block) = &self.pre[TaskKind::Det] {
                let n = select_neck(&neck, r)?;
                let f_pre = block.forward(&n.p[4], &self.prompt(TaskKind::Det)?)?;
                let enc = self.encode(&[(&n.p[1], 0), (&n.p[2], 1), (&n.p[3], 2), (&f_pre, 3)])?;
                head.forward(&enc.o, &enc.seq.pos)?
            } else {
                let enc = plain.as_ref().expect("plain encoding computed");
                let mut o = head.forward(&select(&enc.o, r)?, &enc.seq.pos)?;
                if let Some(block) = &self.post {
                    o.logits = block.forward(
                        &o.logits,
                        &self.prompt(TaskKind::Det)?,
                        &select(&p[4], r)?,
                    )?;
                }
                o
            };
            out.det = Some(HeadOutput {
                rows: r.clone(),
                out: det_out,
            });
        }
        for t in TaskKind::ALL.into_iter().filter(|t| t.is_pixel_task()) {
            let r = &rows[t];
            if r.is_empty() {
                continue;
            }
            let head = self.seg[t].as_ref().expect("checked above");
            let z = match (&seg_enc, &plain) {
                (Some(e), _) if pre => &e.z,
                (_, Some(e)) => &e.z,
                _ => unreachable!("an encoding exists whenever a pixel head runs"),
            };
            let levels = [
                select(&p[0], r)?,
                select(&z[0], r)?,
                select(&z[1], r)?,
                select(&z[2], r)?,
            ];
            let extra = match &self.pre[t] {
                Some(block) => Some(block.forward(&select(&p[4], r)?, &self.prompt(t)?)?),
                None => None,
            };
            let logits = head.forward(&levels, extra.as_ref())?;
            out.seg[t] = Some(HeadOutput {
                rows: r.clone(),
                out: logits,
            });
        }
        Ok(out)
    }

    /// Every head on every row.
    pub fn forward_all(&self, images: &Tensor) -> Result<ModelOutput> {
        let b = images.dim(0)?;
        let mut rows = PerTask::<Vec<usize>>::default();
        for t in self.heads.iter() {
            rows[t] = (0..b).collect();
        }
        self.forward(images, &rows)
    }

    /// Per-task losses, each averaged over the rows labeled for that task.
    pub fn losses(&self, out: &ModelOutput, batch: &Batch) -> Result<TaskLosses> {
        let mut losses = TaskLosses::new();
        if let Some(h) = &out.det {
            let targets: Vec<&DetTarget> = h
                .rows
                .iter()
                .map(|&r| {
                    batch.det_targets[r]
                        .as_ref()
                        .ok_or_else(|| Error::Invalid(format!("row {r} has no boxes")))
                })
                .collect::<Result<_>>()?;
            let per = detection::batch_losses(&h.out, &targets, &self.cfg.matcher)?;
            losses.set(TaskKind::Det, per.mean(0)?);
        }
        for t in TaskKind::ALL.into_iter().filter(|t| t.is_pixel_task()) {
            if let Some(h) = &out.seg[t] {
                let labels = batch.labels(t, &h.rows)?;
                let per = segmentation::pixel_ce(&h.out, &labels)?;
                losses.set(t, per.mean(0)?);
            }
        }
        Ok(losses)
    }
}
