use super::loss::forward_loss;
use super::matching::MatchResult;
use super::stage::instance_prompts;
use super::LossWeights;
use crate::data::Scene;
use crate::detector::{encode_on_tape, forward, token_heads, ModelConfig};
use crate::error::{Error, Result};
use crate::numerics::{GradMap, Objective, ParamStore, Tape, Tensor, Var};
use crate::prompts::{fuse_on_tape, text_features, tokenize};

/// One prompt modality of the joint objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveTerm {
    Text,
    Visual,
    Multimodal,
}

impl ObjectiveTerm {
    pub const ALL: [ObjectiveTerm; 3] = [ObjectiveTerm::Text, ObjectiveTerm::Visual, ObjectiveTerm::Multimodal];
}

/// Sum of the text, visual and multimodal detection losses on one image.
///
/// Query selection and matching are frozen at the parameters passed to
/// [`FullObjective::new`] so that the objective is smooth in a neighbourhood
/// of them. The multimodal term fuses each text prompt with the visual
/// prompt of that category's instances, held constant.
#[derive(Debug, Clone)]
pub struct FullObjective {
    model: ModelConfig,
    image: Tensor,
    weights: LossWeights,
    tokens: Vec<Vec<usize>>,
    labels: Vec<usize>,
    gt: Vec<[f64; 4]>,
    scene: Scene,
    picks: Vec<(usize, Vec<usize>)>,
    visual_labels: Vec<usize>,
    terms: Vec<ObjectiveTerm>,
    fixed: Vec<(Vec<usize>, MatchResult, Option<MatchResult>, Vec<Tensor>)>,
}

impl FullObjective {
    pub fn new(
        model: &ModelConfig,
        store: &ParamStore,
        scene: &Scene,
        categories: &[String],
        weights: LossWeights,
        terms: &[ObjectiveTerm],
    ) -> Result<Self> {
        if scene.annotations.is_empty() {
            return Err(Error::Validation("the objective needs an image with objects".into()));
        }
        let tokens = categories.iter().map(|c| tokenize(c)).collect::<Result<Vec<_>>>()?;
        let labels = scene
            .annotations
            .iter()
            .map(|a| {
                categories
                    .iter()
                    .position(|c| c == &a.category)
                    .ok_or_else(|| Error::Validation(format!("unknown category '{}'", a.category)))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut picks: Vec<(usize, Vec<usize>)> = Vec::new();
        for (i, &k) in labels.iter().enumerate() {
            match picks.iter_mut().find(|(c, _)| *c == k) {
                Some((_, ix)) => ix.push(i),
                None => picks.push((k, vec![i])),
            }
        }
        picks.sort_by_key(|(k, _)| *k);
        let visual_labels = labels
            .iter()
            .map(|&k| picks.iter().position(|(c, _)| *c == k).expect("present"))
            .collect();
        let mut obj = Self {
            model: model.clone(),
            image: scene.image.clone().reshaped(vec![model.image_size * model.image_size, 3])?,
            weights,
            tokens,
            labels,
            gt: scene.annotations.iter().map(|a| a.bbox.to_array()).collect(),
            scene: scene.clone(),
            picks,
            visual_labels,
            terms: terms.to_vec(),
            fixed: Vec::new(),
        };
        let mut fixed = Vec::new();
        let constants = obj.visual_constants(store)?;
        for &term in terms {
            let mut tape = Tape::new();
            let (memory, prompts, labels) = obj.build(&mut tape, store, term, &constants)?;
            let out = forward(&mut tape, store, model, memory, &model.level_shapes(), &prompts, None)?;
            let heads = token_heads(&mut tape, store, model, memory, &model.level_shapes(), &prompts)?;
            let loss = forward_loss(&mut tape, &out, heads, labels, &obj.gt, &weights, None)?;
            fixed.push((out.selected, loss.matching, loss.encoder_matching, constants.clone()));
        }
        obj.fixed = fixed;
        Ok(obj)
    }

    /// Per-category visual prompts at `store`, used as the constant visual
    /// half of the multimodal term.
    fn visual_constants(&self, store: &ParamStore) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let x = tape.constant(self.image.clone());
        let memory = encode_on_tape(&mut tape, store, &self.model, x)?;
        let levels = self.model.level_shapes();
        let v = instance_prompts(&mut tape, store, &self.model, &self.scene.annotations, &self.picks, memory, &levels)?;
        Ok(v.into_iter().map(|v| tape.value(v).clone()).collect())
    }

    fn build<'a>(
        &'a self,
        tape: &mut Tape,
        store: &ParamStore,
        term: ObjectiveTerm,
        constants: &[Tensor],
    ) -> Result<(Var, Vec<Var>, &'a [usize])> {
        let x = tape.constant(self.image.clone());
        let memory = encode_on_tape(tape, store, &self.model, x)?;
        let levels = self.model.level_shapes();
        match term {
            ObjectiveTerm::Text => {
                let p = self
                    .tokens
                    .iter()
                    .map(|t| text_features(tape, store, &self.model, t))
                    .collect::<Result<Vec<_>>>()?;
                Ok((memory, p, &self.labels))
            }
            ObjectiveTerm::Visual => {
                let p = instance_prompts(tape, store, &self.model, &self.scene.annotations, &self.picks, memory, &levels)?;
                Ok((memory, p, &self.visual_labels))
            }
            ObjectiveTerm::Multimodal => {
                let mut p = Vec::with_capacity(self.tokens.len());
                for (k, t) in self.tokens.iter().enumerate() {
                    let g = text_features(tape, store, &self.model, t)?;
                    let v = match self.picks.iter().position(|(c, _)| *c == k) {
                        Some(r) => constants[r].clone(),
                        None => Tensor::zeros(&[1, self.model.d]),
                    };
                    let v = tape.constant(v);
                    p.push(fuse_on_tape(tape, store, &self.model, g, v)?);
                }
                Ok((memory, p, &self.labels))
            }
        }
    }
}

impl Objective for FullObjective {
    fn value(&self, params: &ParamStore) -> Result<f64> {
        Ok(self.value_and_grad(params)?.0)
    }

    fn value_and_grad(&self, params: &ParamStore) -> Result<(f64, GradMap)> {
        let mut tape = Tape::new();
        let mut total: Option<Var> = None;
        for (&term, (selection, matching, enc_matching, constants)) in self.terms.iter().zip(&self.fixed) {
            let (memory, prompts, labels) = self.build(&mut tape, params, term, constants)?;
            let out = forward(&mut tape, params, &self.model, memory, &self.model.level_shapes(), &prompts, Some(selection))?;
            let heads = token_heads(&mut tape, params, &self.model, memory, &self.model.level_shapes(), &prompts)?;
            let fixed = Some((matching, enc_matching.as_ref()));
            let loss = forward_loss(&mut tape, &out, heads, labels, &self.gt, &self.weights, fixed)?;
            total = Some(match total {
                Some(t) => tape.add(t, loss.total)?,
                None => loss.total,
            });
        }
        let total = total.ok_or_else(|| Error::Validation("objective has no terms".into()))?;
        let v = tape.scalar(total);
        Ok((v, tape.backward(total)?.into_param_grads(params)))
    }
}
