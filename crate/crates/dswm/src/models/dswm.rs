//! The dual-stream world model.
//!
//! Inference phase at step t: encode content z_t from o_t, encode context
//! s_t from (o_t, a_{t−1}), write (s_t, z_t) to the episode memory, advance
//! the GRU on (s_t, a_t). Generation phase: predict s*_{t+1} from h_t, read
//! memory at s*_{t+1} to get z*_{t+1}, decode to the predicted observation.
//!
//! Per step the model draws Gumbel noise in a fixed order — content groups,
//! context, forward prediction — so one seeded RNG pins every sample.

use crate::dnd::DndStore;
use crate::gridworld::OBS_DIM;
use crate::models::layers::{Dense, Gru, Mlp3};
use crate::models::Hyper;
use crate::numerics::params::{Lease, ParamSet};
use crate::numerics::tape::{gumbel_noise, Tape, Var};
use rand::Rng;

/// Logits and the gumbel-softmax sample drawn from them. For grouped
/// latents both are the full concatenated width.
#[derive(Clone, Copy, Debug)]
pub struct LatentSample {
    pub logits: Var,
    pub sample: Var,
}

/// Everything one inference+generation step produces.
pub struct DswmStepOutput {
    /// Inferred content latent z_t.
    pub z: LatentSample,
    /// Inferred context latent s_t.
    pub s: LatentSample,
    /// GRU hidden state h_t after consuming (s_t, a_t).
    pub h: Var,
    /// Predicted context s*_{t+1} from the forward head.
    pub pred_s: LatentSample,
    /// Memory read at s*_{t+1}: the predicted content z*_{t+1}.
    pub z_star: Var,
    /// Decoded prediction of o_{t+1}, entries in (0,1).
    pub pred_obs: Var,
    /// Same-step reconstruction decode(z_t), the content-autoencoder path.
    pub recon_obs: Var,
}

/// Loss terms for one step, all tape scalars.
pub struct LossTerms {
    pub l_obs: Var,
    pub l_pos: Var,
    pub l_s: Var,
    pub neg_entropy_z: Var,
    pub neg_entropy_s: Var,
    pub total: Var,
}

pub struct DswmModel {
    pub params: ParamSet,
    pub hyper: Hyper,
    content_enc: Mlp3,
    context_enc: Mlp3,
    gru: Gru,
    forward_head: Dense,
    decoder: Mlp3,
    position_head: Dense,
}

impl DswmModel {
    /// Construct with fan-in uniform initialization. Layers consume `rng`
    /// in declaration order: content encoder, context encoder, GRU, forward
    /// head, decoder, position head.
    pub fn new<R: Rng>(hyper: Hyper, rng: &mut R) -> DswmModel {
        let mut params = ParamSet::new();
        let content_enc = Mlp3::new(
            &mut params,
            "content_enc",
            OBS_DIM,
            hyper.hidden,
            hyper.z_total(),
            rng,
        );
        let context_enc = Mlp3::new(
            &mut params,
            "context_enc",
            hyper.context_input(),
            hyper.hidden,
            hyper.s_categories,
            rng,
        );
        let gru = Gru::new(&mut params, "gru", hyper.gru_input(), hyper.hidden, rng);
        let forward_head =
            Dense::new(&mut params, "forward_head", hyper.hidden, hyper.s_categories, rng);
        let decoder =
            Mlp3::new(&mut params, "decoder", hyper.z_total(), hyper.hidden, OBS_DIM, rng);
        let position_head = Dense::new(&mut params, "position_head", hyper.s_categories, 2, rng);
        DswmModel { params, hyper, content_enc, context_enc, gru, forward_head, decoder, position_head }
    }

    /// Fresh episode memory sized for this model.
    pub fn new_store(&self) -> DndStore {
        DndStore::new(
            self.hyper.s_categories,
            self.hyper.z_total(),
            self.hyper.dnd_top_k,
            self.hyper.dnd_kappa,
        )
    }

    /// Zero initial hidden state (episode start).
    pub fn initial_hidden(&self, tape: &mut Tape) -> Var {
        tape.leaf(vec![0.0; self.hyper.hidden])
    }

    /// Sample each category group of `logits` with its own gumbel-softmax,
    /// drawing noise per group in group order, and concatenate.
    fn sample_grouped<R: Rng>(
        &self,
        tape: &mut Tape,
        rng: &mut R,
        logits: Var,
        groups: usize,
        categories: usize,
    ) -> Var {
        let parts: Vec<Var> = (0..groups)
            .map(|g| {
                let group = tape.slice(logits, g * categories, categories);
                let noise = gumbel_noise(rng, categories);
                tape.gumbel_softmax(group, &noise, self.hyper.temperature)
            })
            .collect();
        if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat(&parts)
        }
    }

    /// Content stream: z_t ~ p_enc(z_t | o_t).
    pub fn encode_content<R: Rng>(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        rng: &mut R,
        o: Var,
    ) -> LatentSample {
        let logits = self.content_enc.apply(tape, lease, o);
        let sample =
            self.sample_grouped(tape, rng, logits, self.hyper.z_groups, self.hyper.z_categories);
        LatentSample { logits, sample }
    }

    /// Context-encoder logits for (o_t, a_{t−1}) without sampling.
    pub fn context_logits(&self, tape: &mut Tape, lease: &Lease, o: Var, a_prev: Var) -> Var {
        let input = tape.concat(&[o, a_prev]);
        self.context_enc.apply(tape, lease, input)
    }

    /// Context stream: s_t ~ p_enc(s_t | o_t, a_{t−1}); `a_prev` is the
    /// previous action's onehot, or all zeros on the first step.
    pub fn encode_context<R: Rng>(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        rng: &mut R,
        o: Var,
        a_prev: Var,
    ) -> LatentSample {
        let logits = self.context_logits(tape, lease, o, a_prev);
        let noise = gumbel_noise(rng, self.hyper.s_categories);
        let sample = tape.gumbel_softmax(logits, &noise, self.hyper.temperature);
        LatentSample { logits, sample }
    }

    /// Forward model: h_t = GRU((s_t, a_t), h_{t−1}) and the predicted
    /// context s*_{t+1} ~ q_forward(· | h_t).
    pub fn forward_context<R: Rng>(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        rng: &mut R,
        s_sample: Var,
        a_t: Var,
        h_prev: Var,
    ) -> (Var, LatentSample) {
        let input = tape.concat(&[s_sample, a_t]);
        let h = self.gru.apply(tape, lease, input, h_prev);
        let logits = self.forward_head.apply(tape, lease, h);
        let noise = gumbel_noise(rng, self.hyper.s_categories);
        let sample = tape.gumbel_softmax(logits, &noise, self.hyper.temperature);
        (h, LatentSample { logits, sample })
    }

    /// Decode a content sample to an observation in (0,1)^75.
    pub fn decode(&self, tape: &mut Tape, lease: &Lease, z: Var) -> Var {
        let pre = self.decoder.apply(tape, lease, z);
        tape.sigmoid(pre)
    }

    /// Position readout from a context sample (normalized coordinates).
    pub fn position_head(&self, tape: &mut Tape, lease: &Lease, s_sample: Var) -> Var {
        self.position_head.apply(tape, lease, s_sample)
    }

    /// One full inference + generation step; writes (s_t, z_t) before the
    /// read, so the first step of an episode reads back its own content.
    #[allow(clippy::too_many_arguments)]
    pub fn dswm_step<R: Rng>(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        rng: &mut R,
        store: &mut DndStore,
        o: Var,
        a_prev: Var,
        a_t: Var,
        h_prev: Var,
    ) -> DswmStepOutput {
        let z = self.encode_content(tape, lease, rng, o);
        let s = self.encode_context(tape, lease, rng, o, a_prev);
        store.write(tape, s.sample, z.sample);
        let (h, pred_s) = self.forward_context(tape, lease, rng, s.sample, a_t, h_prev);
        let z_star = store.read(tape, pred_s.sample);
        let pred_obs = self.decode(tape, lease, z_star);
        let recon_obs = self.decode(tape, lease, z.sample);
        DswmStepOutput { z, s, h, pred_s, z_star, pred_obs, recon_obs }
    }

    /// Loss terms for step t, given the inferred context at t+1 and ground
    /// truth for t+1. `pos_next` is the raw grid position; targets are
    /// normalized by 1/10 to land in [0,1]².
    #[allow(clippy::too_many_arguments)]
    pub fn compute_losses(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        step: &DswmStepOutput,
        next_s: &LatentSample,
        o_t: Var,
        o_next: Var,
        pos_next: (usize, usize),
        beta_z: f64,
        beta_s: f64,
    ) -> LossTerms {
        let pred_err = tape.squared_error(step.pred_obs, o_next);
        let recon_err = tape.squared_error(step.recon_obs, o_t);
        let l_obs = tape.add(pred_err, recon_err);

        let pos_pred = self.position_head(tape, lease, next_s.sample);
        let target =
            tape.leaf(vec![pos_next.0 as f64 / 10.0, pos_next.1 as f64 / 10.0]);
        let l_pos = tape.squared_error(pos_pred, target);

        // Sequence coherence: inferred posterior at t+1 against the forward
        // prediction for t+1; gradients reach both.
        let l_s = tape.categorical_kl(next_s.logits, step.pred_s.logits);

        let neg_entropy_z = self.neg_entropy_grouped(
            tape,
            step.z.logits,
            self.hyper.z_groups,
            self.hyper.z_categories,
        );
        let h_s = tape.entropy(step.s.logits);
        let neg_entropy_s = tape.scale(h_s, -1.0);

        let wz = tape.scale(neg_entropy_z, beta_z);
        let ws = tape.scale(neg_entropy_s, beta_s);
        let total = tape.add_n(&[l_obs, l_pos, l_s, wz, ws]);
        LossTerms { l_obs, l_pos, l_s, neg_entropy_z, neg_entropy_s, total }
    }

    /// −Σ_g H(group g of `logits`).
    pub(crate) fn neg_entropy_grouped(
        &self,
        tape: &mut Tape,
        logits: Var,
        groups: usize,
        categories: usize,
    ) -> Var {
        let parts: Vec<Var> = (0..groups)
            .map(|g| {
                let group = tape.slice(logits, g * categories, categories);
                tape.entropy(group)
            })
            .collect();
        let h = if parts.len() == 1 { parts[0] } else { tape.add_n(&parts) };
        tape.scale(h, -1.0)
    }
}
