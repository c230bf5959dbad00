//! The two halves of a split training step.
//!
//! The client owns the early blocks, the codec encoder side and the data;
//! the server owns the remaining blocks, the head and the codec decoder
//! side. They talk only through [`ActivationPacket`] and [`GradientPacket`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::adc::{self, MergePlan};
use crate::autograd::{Tape, Var};
use crate::baselines::{randtopk_encode, topk_encode, Bottleneck, C3Keys, Sparse};
use crate::codec::{CodecConfig, CodecKind};
use crate::config::{derive_seed, Setup};
use crate::error::{Error, ProtocolError, Result};
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::vit::{check_label_rows, one_hot, ClientModel, ServerModel};
use crate::wire::{ActivationPacket, GradientPacket, Labels, Payload};

/// A learned codec layer with its own parameters and optimiser.
#[derive(Clone, Debug)]
pub struct CodecLayer {
    pub store: ParamStore,
    pub layer: Bottleneck,
    adam: Adam,
}

/// Encoder and decoder of the bottleneck codec. Both roles build the pair
/// from the same seed and keep their own half. At full width both maps start
/// as the identity.
pub fn bottleneck_pair(setup: &Setup, seed: u64) -> Option<(CodecLayer, CodecLayer)> {
    let CodecConfig::BottleNet { width } = setup.codec else {
        return None;
    };
    let d = setup.model.dim;
    let mut enc_store = ParamStore::new();
    let mut dec_store = ParamStore::new();
    let (enc, dec) = if width == d {
        (
            Bottleneck::identity(&mut enc_store, "encoder", d),
            Bottleneck::identity(&mut dec_store, "decoder", d),
        )
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "bottleneck", 0));
        (
            Bottleneck::new(&mut enc_store, "encoder", d, width, &mut rng),
            Bottleneck::new(&mut dec_store, "decoder", width, d, &mut rng),
        )
    };
    let wrap = |store: ParamStore, layer| CodecLayer {
        adam: Adam::new(setup.adam, &store),
        store,
        layer,
    };
    Some((wrap(enc_store, enc), wrap(dec_store, dec)))
}

/// Superposition keys shared by both roles.
pub fn superposition_keys(setup: &Setup, seed: u64) -> Result<Option<C3Keys>> {
    match setup.codec {
        CodecConfig::C3sl { ratio } => Ok(Some(C3Keys::gaussian(
            ratio,
            setup.model.features(),
            derive_seed(seed, "c3sl", 0),
        )?)),
        _ => Ok(None),
    }
}

/// Bits of feature payload in a packet: `32` per value plus `log2 width`
/// per sparse index.
pub fn payload_bits(payload: &Payload, bits_per_feature: f64) -> f64 {
    match payload {
        Payload::Dense(t) => t.len() as f64 * bits_per_feature,
        Payload::Sparse(s) => {
            s.values.len() as f64 * bits_per_feature + s.indices.len() as f64 * (s.width() as f64).log2()
        }
    }
}

/// Outcome of one client step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub iteration: u32,
    pub loss: f64,
    /// Bits charged by the cost model.
    pub forward_bits: f64,
    pub backward_bits: f64,
    /// Label bits carried by the forward packet, kept apart from the charge.
    pub label_bits: f64,
    /// Bits of feature values and indices actually placed in each packet.
    pub forward_payload_bits: f64,
    pub backward_payload_bits: f64,
}

/// What the client must remember to route the returned gradient.
enum Route<'t> {
    Dense,
    Merge(MergePlan),
    Sparse(Sparse),
    Code(Var<'t>),
    Superposed,
}

#[derive(Debug)]
pub struct ClientRole {
    pub model: ClientModel,
    adam: Adam,
    setup: Setup,
    seed: u64,
    encoder: Option<CodecLayer>,
    keys: Option<C3Keys>,
}

impl ClientRole {
    pub fn new(model: ClientModel, setup: &Setup, seed: u64) -> Result<Self> {
        Ok(Self {
            adam: Adam::new(setup.adam, &model.params),
            encoder: bottleneck_pair(setup, seed).map(|(e, _)| e),
            keys: superposition_keys(setup, seed)?,
            setup: setup.clone(),
            seed,
            model,
        })
    }

    pub fn setup(&self) -> &Setup {
        &self.setup
    }

    pub fn encoder(&self) -> Option<&CodecLayer> {
        self.encoder.as_ref()
    }

    /// One training iteration. `exchange` carries the activation packet to
    /// the server and returns its reply.
    pub fn train_step<F>(&mut self, images: &Tensor, labels: &[usize], iteration: u32, exchange: F) -> Result<StepReport>
    where
        F: FnOnce(ActivationPacket) -> Result<GradientPacket>,
    {
        let batch = self.setup.batch;
        if labels.len() != batch || images.shape().first() != Some(&batch) {
            return Err(Error::shape(
                "train_step",
                format!("{} labels and images {:?} for batch size {batch}", labels.len(), images.shape()),
            ));
        }
        let classes = self.setup.model.classes;
        let kind = self.setup.codec.kind();
        let tape = Tape::new();
        let p = self.model.params.bind(&tape);
        let out = self.model.forward(&p, images)?;
        let acts = out.activations;
        let z = acts.value();
        let hard = || Labels::Hard(labels.iter().map(|&y| y as u16).collect());

        let enc_bound = self.encoder.as_ref().map(|e| e.store.bind(&tape));
        let (payload, sent_labels, route) = match &self.setup.codec {
            CodecConfig::Base => (Payload::Dense((*z).clone()), hard(), Route::Dense),
            CodecConfig::Adc(cfg) => {
                let mut cfg = cfg.clone();
                cfg.kmeans.seed = derive_seed(self.seed, "kmeans", iteration as u64);
                let (merged, plan) = adc::encode(&z, &out.cls_scores, labels, classes, &cfg)?;
                (
                    Payload::Dense(merged.features),
                    Labels::Soft(merged.soft_labels),
                    Route::Merge(plan),
                )
            }
            CodecConfig::TopK { k } => {
                let s = topk_encode(&z, *k)?;
                (Payload::Sparse(s.clone()), hard(), Route::Sparse(s))
            }
            CodecConfig::RandTopK { k, noise_scale } => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "randtopk", iteration as u64));
                let s = randtopk_encode(&z, *k, *noise_scale, &mut rng)?;
                (Payload::Sparse(s.clone()), hard(), Route::Sparse(s))
            }
            CodecConfig::BottleNet { .. } => {
                let enc = self.encoder.as_ref().expect("bottleneck codec has an encoder");
                let code = enc.layer.forward(enc_bound.as_ref().unwrap(), acts)?;
                (Payload::Dense((*code.value()).clone()), hard(), Route::Code(code))
            }
            CodecConfig::C3sl { .. } => {
                let keys = self.keys.as_ref().expect("superposition codec has keys");
                (Payload::Dense(keys.encode(&z)?), hard(), Route::Superposed)
            }
        };

        let (forward_bits, backward_bits) = self.setup.cost.charges(self.setup.ratios);
        let forward_payload_bits = payload_bits(&payload, self.setup.cost.bits_per_feature);
        let reply = exchange(ActivationPacket {
            iteration,
            codec: kind,
            charged_bits: forward_bits,
            payload,
            labels: sent_labels,
        })?;
        if reply.iteration != iteration {
            return Err(ProtocolError::Lockstep {
                sent: iteration,
                received: reply.iteration,
            }
            .into());
        }
        if reply.codec != kind {
            return Err(ProtocolError::Malformed(format!("gradient for codec {} during a {kind} run", reply.codec)).into());
        }
        let backward_payload_bits = payload_bits(&reply.payload, self.setup.cost.bits_per_feature);
        let grad = match reply.payload {
            Payload::Dense(t) => t,
            Payload::Sparse(_) => {
                return Err(ProtocolError::Malformed("sparse gradient payload".into()).into());
            }
        };

        let (output, seed) = match route {
            Route::Dense => (acts, grad),
            Route::Merge(plan) => (acts, adc::unmerge_gradient(&grad, &plan, self.setup.model.tokens())?),
            Route::Sparse(s) => (acts, s.with_values(grad)?.to_dense()),
            Route::Code(code) => (code, grad),
            Route::Superposed => {
                let keys = self.keys.as_ref().unwrap();
                (acts, keys.decode(&grad, batch)?.into_shape(z.shape())?)
            }
        };
        if seed.shape() != output.shape().as_slice() {
            return Err(Error::shape(
                "client_backward",
                format!("gradient {:?} for output {:?}", seed.shape(), output.shape()),
            ));
        }
        let grads = tape.backward_with(output, seed)?;
        let client_grads = self.model.params.gradients(&p, &grads);
        self.adam.step(&mut self.model.params, &client_grads);
        if let (Some(enc), Some(bound)) = (self.encoder.as_mut(), enc_bound) {
            let g = enc.store.gradients(&bound, &grads);
            enc.adam.step(&mut enc.store, &g);
        }

        let label_bits = self.setup.cost.label_bits(&self.setup.codec);
        Ok(StepReport {
            iteration,
            loss: reply.loss,
            forward_bits,
            backward_bits,
            label_bits,
            forward_payload_bits,
            backward_payload_bits,
        })
    }

    /// Uncompressed activations for evaluation, passed through the bottleneck
    /// encoder when there is one.
    pub fn eval_activations(&self, images: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.model.params.bind(&tape);
        let acts = self.model.forward(&p, images)?.activations;
        match &self.encoder {
            Some(enc) => {
                let eb = enc.store.bind(&tape);
                Ok((*enc.layer.forward(&eb, acts)?.value()).clone())
            }
            None => Ok((*acts.value()).clone()),
        }
    }
}

#[derive(Debug)]
pub struct ServerRole {
    pub model: ServerModel,
    adam: Adam,
    setup: Setup,
    decoder: Option<CodecLayer>,
    keys: Option<C3Keys>,
}

impl ServerRole {
    pub fn new(model: ServerModel, setup: &Setup, seed: u64) -> Result<Self> {
        Ok(Self {
            adam: Adam::new(setup.adam, &model.params),
            decoder: bottleneck_pair(setup, seed).map(|(_, d)| d),
            keys: superposition_keys(setup, seed)?,
            setup: setup.clone(),
            model,
        })
    }

    pub fn decoder(&self) -> Option<&CodecLayer> {
        self.decoder.as_ref()
    }

    fn check_codec(&self, codec: CodecKind) -> Result<()> {
        if codec != self.setup.codec.kind() {
            return Err(ProtocolError::Malformed(format!(
                "{codec} packet during a {} run",
                self.setup.codec.kind()
            ))
            .into());
        }
        Ok(())
    }

    /// Loss on the received batch, one optimiser step on the server side and
    /// the gradient to send back.
    pub fn train(&mut self, packet: &ActivationPacket) -> Result<GradientPacket> {
        self.check_codec(packet.codec)?;
        let classes = self.setup.model.classes;
        let targets = match &packet.labels {
            Labels::Hard(ys) => {
                if let Some(&y) = ys.iter().find(|&&y| y as usize >= classes) {
                    return Err(Error::contract(format!("label {y} outside {classes} classes")));
                }
                one_hot(&ys.iter().map(|&y| y as usize).collect::<Vec<_>>(), classes)
            }
            Labels::Soft(t) => t.clone(),
        };
        check_label_rows(&targets, classes)?;
        let rows = targets.rows();
        let (n, d) = (self.setup.model.tokens(), self.setup.model.dim);

        let (input, sparse) = match (&self.setup.codec, &packet.payload) {
            (CodecConfig::TopK { .. } | CodecConfig::RandTopK { .. }, Payload::Sparse(s)) => (s.to_dense(), Some(s)),
            (CodecConfig::C3sl { .. }, Payload::Dense(slots)) => {
                let keys = self.keys.as_ref().unwrap();
                (keys.decode(slots, rows)?.into_shape(&[rows, n, d])?, None)
            }
            (CodecConfig::TopK { .. } | CodecConfig::RandTopK { .. }, _) | (_, Payload::Sparse(_)) => {
                return Err(ProtocolError::Malformed("payload layout does not match the codec".into()).into());
            }
            (_, Payload::Dense(t)) => (t.clone(), None),
        };
        if input.ndim() != 3 || input.shape()[0] != rows {
            return Err(Error::shape(
                "server_train",
                format!("activations {:?} with {rows} label rows", input.shape()),
            ));
        }

        let tape = Tape::new();
        let sp = self.model.params.bind(&tape);
        let x = tape.leaf(input);
        let dec_bound = self.decoder.as_ref().map(|l| l.store.bind(&tape));
        let h = match (&self.decoder, &dec_bound) {
            (Some(l), Some(b)) => l.layer.forward(b, x)?,
            _ => x,
        };
        let loss = self.model.forward(&sp, h)?.soft_cross_entropy(&targets)?;
        let grads = tape.backward(loss)?;
        let input_grad = grads.get_or_zeros(x);
        let server_grads = self.model.params.gradients(&sp, &grads);
        self.adam.step(&mut self.model.params, &server_grads);
        if let (Some(l), Some(b)) = (self.decoder.as_mut(), dec_bound) {
            let g = l.store.gradients(&b, &grads);
            l.adam.step(&mut l.store, &g);
        }

        let payload = match (&self.setup.codec, sparse) {
            (_, Some(s)) => s.gather(&input_grad)?,
            (CodecConfig::C3sl { .. }, None) => {
                let keys = self.keys.as_ref().unwrap();
                keys.encode_zero_padded(&input_grad.into_shape(&[rows, n * d])?)?
            }
            _ => input_grad,
        };
        let (_, backward_bits) = self.setup.cost.charges(self.setup.ratios);
        Ok(GradientPacket {
            iteration: packet.iteration,
            codec: packet.codec,
            charged_bits: backward_bits,
            payload: Payload::Dense(payload),
            loss: loss.value().item(),
        })
    }

    /// Logits for uncompressed evaluation activations.
    pub fn evaluate(&self, activations: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let sp = self.model.params.bind(&tape);
        let x = tape.constant(activations.clone());
        let h = match &self.decoder {
            Some(l) => l.layer.forward(&l.store.bind(&tape), x)?,
            None => x,
        };
        Ok((*self.model.forward(&sp, h)?.value()).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;
    use crate::vit::SplitModel;

    fn tiny(codec: CodecKind, xi: Option<f64>) -> RunConfig {
        RunConfig {
            codec,
            xi,
            batch_size: 4,
            image_size: 8,
            patch: 4,
            dim: 8,
            heads: 2,
            blocks: 3,
            split_point: 2,
            mlp_ratio: 2,
            classes: 3,
            ..Default::default()
        }
    }

    fn roles(cfg: &RunConfig) -> (ClientRole, ServerRole) {
        let setup = cfg.setup().unwrap();
        let m = SplitModel::init(&setup.model, 5).unwrap();
        (
            ClientRole::new(m.client, &setup, 5).unwrap(),
            ServerRole::new(m.server, &setup, 5).unwrap(),
        )
    }

    fn batch() -> (Tensor, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        (Tensor::randn(&[4, 3, 8, 8], 1.0, &mut rng), vec![0, 1, 2, 1])
    }

    #[test]
    fn every_codec_steps_and_reports_its_ratio() {
        for kind in CodecKind::ALL {
            let xi = (kind != CodecKind::Base).then_some(0.5);
            let cfg = tiny(kind, xi);
            let (mut client, mut server) = roles(&cfg);
            let (x, y) = batch();
            let r = client.train_step(&x, &y, 0, |p| server.train(&p)).unwrap();
            let s = client.setup();
            let half = s.cost.base_iteration() / 2.0;
            assert_eq!(r.forward_bits, s.ratios.forward * half, "{kind}");
            assert_eq!(r.backward_bits, s.ratios.backward * half, "{kind}");
            assert!(r.loss.is_finite());
            assert!(client.model.params.tensors().iter().all(Tensor::all_finite));
        }
    }

    #[test]
    fn lockstep_violation_is_reported() {
        let (mut client, mut server) = roles(&tiny(CodecKind::Base, None));
        let (x, y) = batch();
        let err = client
            .train_step(&x, &y, 3, |p| {
                let mut g = server.train(&p)?;
                g.iteration = 4;
                Ok(g)
            })
            .unwrap_err();
        assert!(matches!(err, Error::Protocol(ProtocolError::Lockstep { sent: 3, received: 4 })));
    }

    #[test]
    fn codec_mismatch_is_rejected() {
        let (mut client, _) = roles(&tiny(CodecKind::Base, None));
        let (_, mut server) = roles(&tiny(CodecKind::TopK, Some(0.5)));
        let (x, y) = batch();
        assert!(client.train_step(&x, &y, 0, |p| server.train(&p)).is_err());
    }

    #[test]
    fn bad_labels_are_rejected() {
        let (mut client, mut server) = roles(&tiny(CodecKind::Base, None));
        let (x, _) = batch();
        assert!(client.train_step(&x, &[0, 1, 5, 1], 0, |p| server.train(&p)).is_err());
        assert!(client.train_step(&x, &[0, 1], 0, |p| server.train(&p)).is_err());
    }

    #[test]
    fn full_width_bottleneck_matches_base() {
        let cfg = RunConfig {
            bottleneck_width: Some(8),
            ..tiny(CodecKind::BottleNet, None)
        };
        let (mut c1, mut s1) = roles(&cfg);
        let (mut c2, mut s2) = roles(&tiny(CodecKind::Base, None));
        let (x, y) = batch();
        let a = c1.train_step(&x, &y, 0, |p| s1.train(&p)).unwrap();
        let b = c2.train_step(&x, &y, 0, |p| s2.train(&p)).unwrap();
        assert!((a.loss - b.loss).abs() < 1e-12);
        for (p, q) in c1.model.params.tensors().iter().zip(c2.model.params.tensors()) {
            assert!(p.max_abs_diff(q) < 1e-12);
        }
    }
}
