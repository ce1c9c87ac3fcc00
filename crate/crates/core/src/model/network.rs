//! End-to-end forward and backward passes for a [`ModelSpec`].

use crate::caps::{
    caps_dense_backward, caps_dense_forward, channels_to_capsules, squash, squash_backward, CapsDenseParams,
    CapsTensor, RoutingTrace,
};
use crate::data::Batch;
use crate::error::{dim_err, Error, Result};
use crate::model::params::{caps_names, conv_names, decoder_names, ModelGrads, ModelParams, PRIMARY_BIAS, PRIMARY_KERNEL};
use crate::model::spec::ModelSpec;
use crate::objective::{
    mask_capsules, mask_capsules_backward, margin_loss_grad, reconstruction_loss_grad, recon_share, total_loss,
    CapsuleSelect, LossBreakdown,
};
use crate::ops::{
    conv2d, conv2d_backward, dense, dense_backward, depthwise_conv2d, depthwise_conv2d_backward, normalize,
    normalize_backward, relu, relu_backward, Elementwise, NormCache,
};
use crate::ops::activation::elementwise;
use crate::tensor::{Scalar, Tensor};

/// Which reconstructions the decoder produces.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Reconstruct {
    Off,
    /// Decode the longest output capsule of each item.
    Longest,
    /// One reconstruction per entry, decoding the given class of each item.
    Targets(Vec<Vec<usize>>),
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Batch statistics instead of running estimates in batch-normalised layers.
    pub training: bool,
    pub reconstruct: Reconstruct,
    /// Retain intermediate values so [`backward`] can run.
    pub keep_cache: bool,
}

impl ForwardOptions {
    pub fn inference() -> Self {
        Self {
            training: false,
            reconstruct: Reconstruct::Off,
            keep_cache: false,
        }
    }
}

struct ConvCache<T> {
    input: Tensor<T>,
    pre_relu: Tensor<T>,
    norm: NormCache<T>,
}

struct DecoderPass<T> {
    chosen: Vec<usize>,
    /// Input to each dense layer.
    inputs: Vec<Tensor<T>>,
    /// Pre-activation of each dense layer.
    pre: Vec<Tensor<T>>,
}

struct Cache<T> {
    convs: Vec<ConvCache<T>>,
    primary_input: Tensor<T>,
    primary_pre: CapsTensor<T>,
    caps_inputs: Vec<CapsTensor<T>>,
    decoder: Vec<DecoderPass<T>>,
}

pub struct ForwardOutput<T = f32> {
    /// Output capsule lengths, `[N, classes]`.
    pub lengths: Tensor<T>,
    /// Output capsules, `[N, classes, d]`.
    pub caps: CapsTensor<T>,
    /// One routing trace per routed capsule layer.
    pub traces: Vec<RoutingTrace<T>>,
    /// Decoder outputs, `[N, H*W*C]` each.
    pub reconstructions: Vec<Tensor<T>>,
    /// Training-mode batch statistics `(layer, mean, var)` of batch-normalised layers.
    pub norm_stats: Vec<(usize, Vec<T>, Vec<T>)>,
    cache: Option<Cache<T>>,
}

impl<T: Scalar> ForwardOutput<T> {
    /// Routing trace of the final capsule layer.
    pub fn trace(&self) -> &RoutingTrace<T> {
        self.traces.last().expect("at least one routed layer")
    }
}

fn check_input<T: Scalar>(spec: &ModelSpec, images: &Tensor<T>) -> Result<()> {
    let [h, w, c] = spec.input_shape;
    if images.rank() != 4 || images.shape()[1..] != [h, w, c] {
        return Err(dim_err!(
            "model '{}' expects [N, {h}, {w}, {c}] input, got {:?}",
            spec.name,
            images.shape()
        ));
    }
    Ok(())
}

fn caps_params<T: Scalar>(params: &ModelParams<T>, i: usize) -> Result<CapsDenseParams<T>> {
    let [wn, bn] = caps_names(i);
    CapsDenseParams::new(params.get(&wn)?.clone(), params.get(&bn)?.clone())
}

pub fn forward<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    images: &Tensor<T>,
    opts: &ForwardOptions,
) -> Result<ForwardOutput<T>> {
    check_input(spec, images)?;
    let keep = opts.keep_cache;
    let mut convs = Vec::new();
    let mut norm_stats = Vec::new();
    let mut x = images.clone();
    for (i, layer) in spec.conv_stack.iter().enumerate() {
        let [kn, bn, gn, ben] = conv_names(i);
        let pre = conv2d(&x, params.get(&kn)?, params.get(&bn)?, layer.stride)?;
        let act = relu(&pre);
        let normed = normalize(
            &act,
            params.get(&gn)?,
            params.get(&ben)?,
            layer.norm,
            params.running_for(i),
            opts.training,
        )?;
        if let (Some(m), Some(v)) = (normed.batch_mean, normed.batch_var) {
            norm_stats.push((i, m, v));
        }
        if keep {
            convs.push(ConvCache {
                input: x,
                pre_relu: pre,
                norm: normed.cache,
            });
        }
        x = normed.output;
    }

    let pre = depthwise_conv2d(&x, params.get(PRIMARY_KERNEL)?, params.get(PRIMARY_BIAS)?, 1)?;
    if pre.dim(1) != 1 || pre.dim(2) != 1 {
        return Err(Error::Config("primary-capsule kernel must span the feature map".into()));
    }
    let primary_pre = channels_to_capsules(pre, spec.primary.count, spec.primary.dim)?;
    let mut u = squash(&primary_pre);

    let mut traces = Vec::new();
    let mut caps_inputs = Vec::new();
    for i in 0..spec.caps_dense.len() {
        let p = caps_params(params, i)?;
        let (v, trace) = caps_dense_forward(&u, &p)?;
        traces.push(trace);
        if keep {
            caps_inputs.push(u);
        }
        u = v;
    }
    let lengths = u.lengths();

    let selections: Vec<CapsuleSelect> = match (&opts.reconstruct, &spec.decoder) {
        (Reconstruct::Off, _) | (_, None) => Vec::new(),
        (Reconstruct::Longest, Some(_)) => vec![CapsuleSelect::ByLongest],
        (Reconstruct::Targets(sets), Some(_)) => sets.iter().cloned().map(CapsuleSelect::ByTarget).collect(),
    };
    let mut reconstructions = Vec::with_capacity(selections.len());
    let mut decoder = Vec::new();
    if let Some(dec) = &spec.decoder {
        let depth = dec.hidden.len() + 1;
        for select in &selections {
            let (masked, chosen) = mask_capsules(&u, select)?;
            let mut inputs = Vec::with_capacity(depth);
            let mut pres = Vec::with_capacity(depth);
            let mut h = masked;
            for layer in 0..depth {
                let [wn, bn] = decoder_names(layer);
                let z = dense(&h, params.get(&wn)?, params.get(&bn)?)?;
                let a = if layer + 1 < depth {
                    relu(&z)
                } else {
                    elementwise(&z, Elementwise::Sigmoid)
                };
                if keep {
                    inputs.push(h);
                    pres.push(z);
                }
                h = a;
            }
            reconstructions.push(h);
            if keep {
                decoder.push(DecoderPass {
                    chosen,
                    inputs,
                    pre: pres,
                });
            }
        }
    }

    Ok(ForwardOutput {
        lengths,
        caps: u,
        traces,
        reconstructions,
        norm_stats,
        cache: keep.then_some(Cache {
            convs,
            primary_input: x,
            primary_pre,
            caps_inputs,
            decoder,
        }),
    })
}

struct GradSink<T> {
    slots: Vec<(String, Option<Tensor<T>>)>,
}

impl<T: Scalar> GradSink<T> {
    fn new(params: &ModelParams<T>) -> Self {
        Self {
            slots: params.iter().map(|(n, _)| (n.to_string(), None)).collect(),
        }
    }

    fn put(&mut self, name: &str, grad: Tensor<T>) -> Result<()> {
        let slot = self
            .slots
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Config(format!("gradient for unknown parameter '{name}'")))?;
        match &mut slot.1 {
            Some(acc) => acc.add_assign(&grad)?,
            empty => *empty = Some(grad),
        }
        Ok(())
    }

    fn finish(self, params: &ModelParams<T>) -> ModelGrads<T> {
        ModelGrads {
            tensors: self
                .slots
                .into_iter()
                .zip(params.iter())
                .map(|((name, g), (_, p))| {
                    let g = g.unwrap_or_else(|| Tensor::zeros(p.shape()));
                    (name, g)
                })
                .collect(),
        }
    }
}

/// Backpropagates loss gradients with respect to the output lengths and to
/// each reconstruction. `out` must come from a forward with `keep_cache`.
pub fn backward<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    out: &ForwardOutput<T>,
    grad_lengths: &Tensor<T>,
    grad_recons: &[Tensor<T>],
) -> Result<ModelGrads<T>> {
    let cache = out
        .cache
        .as_ref()
        .ok_or_else(|| Error::Argument("backward needs a forward pass run with keep_cache".into()))?;
    if grad_recons.len() != out.reconstructions.len() {
        return Err(Error::Argument(format!(
            "{} reconstruction gradients for {} reconstructions",
            grad_recons.len(),
            out.reconstructions.len()
        )));
    }
    let mut sink = GradSink::new(params);
    let mut dcaps = out.caps.lengths_backward(grad_lengths)?;

    if let Some(dec) = &spec.decoder {
        let depth = dec.hidden.len() + 1;
        for ((pass, recon), grad) in cache.decoder.iter().zip(&out.reconstructions).zip(grad_recons) {
            let mut dh = recon.zip_map(grad, |y, g| g * y * (T::one() - y))?;
            for layer in (0..depth).rev() {
                let [wn, bn] = decoder_names(layer);
                let g = dense_backward(&pass.inputs[layer], params.get(&wn)?, &dh)?;
                sink.put(&wn, g.weight)?;
                sink.put(&bn, g.bias)?;
                dh = if layer > 0 {
                    relu_backward(&pass.pre[layer - 1], &g.input)?
                } else {
                    g.input
                };
            }
            dcaps.add_assign(&mask_capsules_backward(&out.caps, &pass.chosen, &dh)?)?;
        }
    }

    for i in (0..spec.caps_dense.len()).rev() {
        let p = caps_params(params, i)?;
        let g = caps_dense_backward(&cache.caps_inputs[i], &p, &out.traces[i], &dcaps)?;
        let [wn, bn] = caps_names(i);
        sink.put(&wn, g.w)?;
        sink.put(&bn, g.b)?;
        dcaps = g.input;
    }

    let dpre = squash_backward(&cache.primary_pre, &dcaps)?;
    let n = dpre.dim(0);
    let f = spec.primary.count * spec.primary.dim;
    let dpre = dpre.reshape(&[n, 1, 1, f])?;
    let g = depthwise_conv2d_backward(&cache.primary_input, params.get(PRIMARY_KERNEL)?, 1, &dpre, true)?;
    sink.put(PRIMARY_KERNEL, g.kernel)?;
    sink.put(PRIMARY_BIAS, g.bias)?;
    let mut dx = g.input.expect("input gradient requested");

    for (i, layer) in spec.conv_stack.iter().enumerate().rev() {
        let c = &cache.convs[i];
        let [kn, bn, gn, ben] = conv_names(i);
        let ng = normalize_backward(&c.norm, params.get(&gn)?, &dx)?;
        sink.put(&gn, ng.gamma)?;
        sink.put(&ben, ng.beta)?;
        let dpre = relu_backward(&c.pre_relu, &ng.input)?;
        let cg = conv2d_backward(&c.input, params.get(&kn)?, layer.stride, &dpre, i > 0)?;
        sink.put(&kn, cg.kernel)?;
        sink.put(&bn, cg.bias)?;
        if let Some(next) = cg.input {
            dx = next;
        }
    }
    Ok(sink.finish(params))
}

fn recon_request<T: Scalar>(spec: &ModelSpec, batch: &Batch<T>) -> Reconstruct {
    if spec.decoder.is_none() || batch.recon.is_empty() {
        Reconstruct::Off
    } else {
        Reconstruct::Targets(batch.recon.iter().map(|r| r.classes.clone()).collect())
    }
}

/// Training-mode total loss without gradients.
pub fn loss_value<T: Scalar>(spec: &ModelSpec, params: &ModelParams<T>, batch: &Batch<T>) -> Result<LossBreakdown> {
    let opts = ForwardOptions {
        training: true,
        reconstruct: recon_request(spec, batch),
        keep_cache: false,
    };
    let out = forward(spec, params, &batch.images, &opts)?;
    let pairs: Vec<_> = out.reconstructions.iter().zip(&batch.recon).map(|(d, r)| (d, &r.image)).collect();
    total_loss(&out.lengths, &batch.targets, &pairs, &spec.loss)
}

/// Training-mode loss, parameter gradients and batch-norm statistics.
pub fn loss_and_grad<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    batch: &Batch<T>,
) -> Result<(LossBreakdown, ModelGrads<T>, ForwardOutput<T>)> {
    let opts = ForwardOptions {
        training: true,
        reconstruct: recon_request(spec, batch),
        keep_cache: true,
    };
    let out = forward(spec, params, &batch.images, &opts)?;
    let pairs: Vec<_> = out.reconstructions.iter().zip(&batch.recon).map(|(d, r)| (d, &r.image)).collect();
    let loss = total_loss(&out.lengths, &batch.targets, &pairs, &spec.loss)?;

    let grad_lengths = margin_loss_grad(&out.lengths, &batch.targets, &spec.loss)?;
    let share = T::of(recon_share(&spec.loss, pairs.len()));
    let grad_recons = pairs
        .iter()
        .map(|(d, img)| reconstruction_loss_grad(d, img).map(|g| g.map(|v| v * share)))
        .collect::<Result<Vec<_>>>()?;
    let grads = backward(spec, params, &out, &grad_lengths, &grad_recons)?;
    Ok((loss, grads, out))
}

/// Folds training-mode batch statistics into the running estimates.
pub fn apply_norm_stats<T: Scalar>(params: &mut ModelParams<T>, stats: &[(usize, Vec<T>, Vec<T>)]) {
    for (layer, mean, var) in stats {
        if let Some(r) = params.running_for_mut(*layer) {
            r.update(mean, var);
        }
    }
}

/// Inference-mode output lengths, computed in chunks of `chunk` items.
pub fn predict_lengths<T: Scalar>(
    spec: &ModelSpec,
    params: &ModelParams<T>,
    images: &Tensor<T>,
    chunk: usize,
) -> Result<Tensor<T>> {
    check_input(spec, images)?;
    let n = images.dim(0);
    let per: usize = images.shape()[1..].iter().product();
    let classes = spec.num_classes();
    let mut out = Vec::with_capacity(n * classes);
    let chunk = chunk.max(1);
    let mut start = 0;
    while start < n {
        let end = (start + chunk).min(n);
        let mut shape = images.shape().to_vec();
        shape[0] = end - start;
        let part = Tensor::new(&shape, images.data()[start * per..end * per].to_vec())?;
        let fwd = forward(spec, params, &part, &ForwardOptions::inference())?;
        out.extend_from_slice(fwd.lengths.data());
        start = end;
    }
    Tensor::new(&[n, classes], out)
}

/// Runs the decoder on flattened masked capsules `[N, classes * d]`.
pub fn decode<T: Scalar>(spec: &ModelSpec, params: &ModelParams<T>, masked: &Tensor<T>) -> Result<Tensor<T>> {
    let dec = spec
        .decoder
        .as_ref()
        .ok_or_else(|| Error::Config(format!("model '{}' has no decoder", spec.name)))?;
    let depth = dec.hidden.len() + 1;
    let mut h = masked.clone();
    for layer in 0..depth {
        let [wn, bn] = decoder_names(layer);
        let z = dense(&h, params.get(&wn)?, params.get(&bn)?)?;
        h = if layer + 1 < depth {
            relu(&z)
        } else {
            elementwise(&z, Elementwise::Sigmoid)
        };
    }
    Ok(h)
}
