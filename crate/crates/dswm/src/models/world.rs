//! Single-stream baseline: one latent z carries both content and structure,
//! with matched latent capacity (8×16 categorical groups) and no memory.
//!
//! Per step the noise draw order is: encoder groups, then forward-prediction
//! groups.

use crate::gridworld::OBS_DIM;
use crate::models::dswm::LatentSample;
use crate::models::layers::{Dense, Gru, Mlp3};
use crate::models::Hyper;
use crate::numerics::params::{Lease, ParamSet};
use crate::numerics::tape::{gumbel_noise, Tape, Var};
use rand::Rng;

pub struct WorldStepOutput {
    /// Inferred latent z_t.
    pub z: LatentSample,
    /// GRU hidden state after consuming (z_t, a_t).
    pub h: Var,
    /// Predicted latent z*_{t+1} from the forward head.
    pub pred_z: LatentSample,
    /// Decoded prediction of o_{t+1}.
    pub pred_obs: Var,
    /// Same-step reconstruction decode(z_t).
    pub recon_obs: Var,
}

/// Loss terms for one step. The latent-consistency KL plays the same
/// structural role as the DSWM's context KL.
pub struct WorldLossTerms {
    pub l_obs: Var,
    pub l_z: Var,
    pub neg_entropy_z: Var,
    pub total: Var,
}

pub struct WorldModel {
    pub params: ParamSet,
    pub hyper: Hyper,
    encoder: Mlp3,
    gru: Gru,
    forward_head: Dense,
    decoder: Mlp3,
}

impl WorldModel {
    /// Layers consume `rng` in order: encoder, GRU, forward head, decoder.
    pub fn new<R: Rng>(hyper: Hyper, rng: &mut R) -> WorldModel {
        let mut params = ParamSet::new();
        let encoder =
            Mlp3::new(&mut params, "encoder", OBS_DIM, hyper.hidden, hyper.z_total(), rng);
        let gru = Gru::new(&mut params, "gru", hyper.world_gru_input(), hyper.hidden, rng);
        let forward_head =
            Dense::new(&mut params, "forward_head", hyper.hidden, hyper.z_total(), rng);
        let decoder =
            Mlp3::new(&mut params, "decoder", hyper.z_total(), hyper.hidden, OBS_DIM, rng);
        WorldModel { params, hyper, encoder, gru, forward_head, decoder }
    }

    pub fn initial_hidden(&self, tape: &mut Tape) -> Var {
        tape.leaf(vec![0.0; self.hyper.hidden])
    }

    fn sample_grouped<R: Rng>(&self, tape: &mut Tape, rng: &mut R, logits: Var) -> Var {
        let (groups, categories) = (self.hyper.z_groups, self.hyper.z_categories);
        let parts: Vec<Var> = (0..groups)
            .map(|g| {
                let group = tape.slice(logits, g * categories, categories);
                let noise = gumbel_noise(rng, categories);
                tape.gumbel_softmax(group, &noise, self.hyper.temperature)
            })
            .collect();
        tape.concat(&parts)
    }

    /// Encoder logits for o_t without sampling.
    pub fn encode_logits(&self, tape: &mut Tape, lease: &Lease, o: Var) -> Var {
        self.encoder.apply(tape, lease, o)
    }

    pub fn encode<R: Rng>(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        rng: &mut R,
        o: Var,
    ) -> LatentSample {
        let logits = self.encode_logits(tape, lease, o);
        let sample = self.sample_grouped(tape, rng, logits);
        LatentSample { logits, sample }
    }

    pub fn decode(&self, tape: &mut Tape, lease: &Lease, z: Var) -> Var {
        let pre = self.decoder.apply(tape, lease, z);
        tape.sigmoid(pre)
    }

    /// One step: encode o_t, advance the GRU on (z_t, a_t), predict
    /// z*_{t+1}, decode both the prediction and the reconstruction.
    pub fn world_step<R: Rng>(
        &self,
        tape: &mut Tape,
        lease: &Lease,
        rng: &mut R,
        o: Var,
        a_t: Var,
        h_prev: Var,
    ) -> WorldStepOutput {
        let z = self.encode(tape, lease, rng, o);
        let input = tape.concat(&[z.sample, a_t]);
        let h = self.gru.apply(tape, lease, input, h_prev);
        let pred_logits = self.forward_head.apply(tape, lease, h);
        let pred_sample = self.sample_grouped(tape, rng, pred_logits);
        let pred_z = LatentSample { logits: pred_logits, sample: pred_sample };
        let pred_obs = self.decode(tape, lease, pred_z.sample);
        let recon_obs = self.decode(tape, lease, z.sample);
        WorldStepOutput { z, h, pred_z, pred_obs, recon_obs }
    }

    /// Loss terms for step t given the inferred latent at t+1 and ground
    /// truth observations: prediction + reconstruction error, per-group KL
    /// between the inferred z_{t+1} and the prediction z*_{t+1}, and
    /// entropy regularization.
    pub fn compute_losses(
        &self,
        tape: &mut Tape,
        step: &WorldStepOutput,
        next_z: &LatentSample,
        o_t: Var,
        o_next: Var,
        beta_z: f64,
    ) -> WorldLossTerms {
        let pred_err = tape.squared_error(step.pred_obs, o_next);
        let recon_err = tape.squared_error(step.recon_obs, o_t);
        let l_obs = tape.add(pred_err, recon_err);

        let (groups, categories) = (self.hyper.z_groups, self.hyper.z_categories);
        let kls: Vec<Var> = (0..groups)
            .map(|g| {
                let p = tape.slice(next_z.logits, g * categories, categories);
                let q = tape.slice(step.pred_z.logits, g * categories, categories);
                tape.categorical_kl(p, q)
            })
            .collect();
        let l_z = tape.add_n(&kls);

        let parts: Vec<Var> = (0..groups)
            .map(|g| {
                let group = tape.slice(step.z.logits, g * categories, categories);
                tape.entropy(group)
            })
            .collect();
        let h_z = tape.add_n(&parts);
        let neg_entropy_z = tape.scale(h_z, -1.0);

        let wz = tape.scale(neg_entropy_z, beta_z);
        let total = tape.add_n(&[l_obs, l_z, wz]);
        WorldLossTerms { l_obs, l_z, neg_entropy_z, total }
    }
}
