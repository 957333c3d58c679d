use super::{block_layout, Backbone, EncoderOutput, LatentSample, Model, ModelConfig, Variant};
use crate::distributions::{CategoricalPosterior, DiagonalGaussian};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const KERNEL: usize = 4;
const STRIDE: usize = 2;
const PAD: usize = 1;
const FEATURES: usize = 256;
const EMBED: usize = 128;
const TRUNK_CHANNELS: usize = 64;
const TRUNK_EXTENT: usize = 4;

fn linear_shapes(out: &mut Vec<(String, Vec<usize>)>, name: &str, fan_in: usize, fan_out: usize) {
    out.push((format!("{name}.w"), vec![fan_out, fan_in]));
    out.push((format!("{name}.b"), vec![fan_out]));
}

fn conv_shapes(out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize) {
    out.push((format!("{name}.w"), vec![cout, cin, KERNEL, KERNEL]));
    out.push((format!("{name}.b"), vec![cout]));
}

fn deconv_shapes(out: &mut Vec<(String, Vec<usize>)>, name: &str, cin: usize, cout: usize) {
    out.push((format!("{name}.w"), vec![cin, cout, KERNEL, KERNEL]));
    out.push((format!("{name}.b"), vec![cout]));
}

fn feature_width(cfg: &ModelConfig) -> usize {
    match cfg.backbone {
        Backbone::Conv => FEATURES,
        Backbone::Mlp { hidden } => hidden,
    }
}

fn embed_width(cfg: &ModelConfig) -> usize {
    match cfg.backbone {
        Backbone::Conv => EMBED,
        Backbone::Mlp { hidden } => hidden,
    }
}

/// Width of the single decoder input for the approx and joint variants.
fn joint_input_width(cfg: &ModelConfig) -> usize {
    cfg.public_dim + cfg.private_dim + cfg.discrete_dim
}

/// Every parameter of the architecture described by `cfg`, with its shape.
pub(super) fn parameter_shapes(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let mut s = Vec::new();
    let (pb, pr, d) = (cfg.public_dim, cfg.private_dim, cfg.discrete_dim);
    let f = feature_width(cfg);
    match cfg.backbone {
        Backbone::Conv => {
            conv_shapes(&mut s, "enc.conv1", cfg.channels, 32);
            if cfg.image_extent == 64 {
                conv_shapes(&mut s, "enc.conv1b", 32, 32);
            }
            conv_shapes(&mut s, "enc.conv2", 32, TRUNK_CHANNELS);
            conv_shapes(&mut s, "enc.conv3", TRUNK_CHANNELS, TRUNK_CHANNELS);
            linear_shapes(&mut s, "enc.fc", TRUNK_CHANNELS * TRUNK_EXTENT * TRUNK_EXTENT, f);
        }
        Backbone::Mlp { hidden } => linear_shapes(&mut s, "enc.fc", cfg.pixels(), hidden),
    }
    linear_shapes(&mut s, "enc.z_mu", f, pb);
    linear_shapes(&mut s, "enc.z_logvar", f, pb);
    linear_shapes(&mut s, "enc.logits", f, d);
    if cfg.has_private() {
        linear_shapes(&mut s, "enc.w_mu", f + d, d * pr);
        linear_shapes(&mut s, "enc.w_logvar", f + d, d * pr);
    }

    let hidden = match cfg.variant {
        Variant::Exact => {
            let e = embed_width(cfg);
            linear_shapes(&mut s, "dec.pub", pb, e);
            linear_shapes(&mut s, "dec.priv", d * pr + d, e);
            2 * e
        }
        Variant::Approx | Variant::Joint => {
            let h = feature_width(cfg);
            linear_shapes(&mut s, "dec.in", joint_input_width(cfg), h);
            h
        }
    };
    match cfg.backbone {
        Backbone::Conv => {
            linear_shapes(&mut s, "dec.fc", hidden, TRUNK_CHANNELS * TRUNK_EXTENT * TRUNK_EXTENT);
            if cfg.image_extent == 64 {
                deconv_shapes(&mut s, "dec.deconv0", TRUNK_CHANNELS, TRUNK_CHANNELS);
            }
            deconv_shapes(&mut s, "dec.deconv1", TRUNK_CHANNELS, 32);
            deconv_shapes(&mut s, "dec.deconv2", 32, 32);
            deconv_shapes(&mut s, "dec.deconv3", 32, cfg.channels);
        }
        Backbone::Mlp { .. } => linear_shapes(&mut s, "dec.out", hidden, cfg.pixels()),
    }
    s
}

fn dense(model: &Model, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&model.params, &format!("{name}.w"))?;
    let b = g.param(&model.params, &format!("{name}.b"))?;
    g.linear(x, w, Some(b))
}

fn dense_relu(model: &Model, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let y = dense(model, g, x, name)?;
    g.relu(y)
}

fn conv_relu(model: &Model, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&model.params, &format!("{name}.w"))?;
    let b = g.param(&model.params, &format!("{name}.b"))?;
    let y = g.conv2d(x, w, Some(b), STRIDE, PAD)?;
    g.relu(y)
}

fn deconv(model: &Model, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
    let w = g.param(&model.params, &format!("{name}.w"))?;
    let b = g.param(&model.params, &format!("{name}.b"))?;
    g.conv_transpose2d(x, w, Some(b), STRIDE, PAD)
}

pub(super) fn encode(model: &Model, g: &mut Graph, x: &Tensor) -> Result<EncoderOutput> {
    let cfg = &model.config;
    let e = cfg.image_extent;
    let batch = match *x.shape() {
        [b, c, h, w] if c == cfg.channels && h == e && w == e && b > 0 => b,
        _ => {
            return Err(Error::shape(
                "encode",
                format!(
                    "expected [batch, {}, {e}, {e}] images, got {:?}",
                    cfg.channels,
                    x.shape()
                ),
            ))
        }
    };
    let input = g.constant(x.clone());
    let h = match cfg.backbone {
        Backbone::Conv => {
            let mut h = conv_relu(model, g, input, "enc.conv1")?;
            if e == 64 {
                h = conv_relu(model, g, h, "enc.conv1b")?;
            }
            h = conv_relu(model, g, h, "enc.conv2")?;
            h = conv_relu(model, g, h, "enc.conv3")?;
            let flat = g.reshape(h, &[batch, TRUNK_CHANNELS * TRUNK_EXTENT * TRUNK_EXTENT])?;
            dense_relu(model, g, flat, "enc.fc")?
        }
        Backbone::Mlp { .. } => {
            let flat = g.reshape(input, &[batch, cfg.pixels()])?;
            dense_relu(model, g, flat, "enc.fc")?
        }
    };
    let z_mu = dense(model, g, h, "enc.z_mu")?;
    let z_logvar = dense(model, g, h, "enc.z_logvar")?;
    let logits = dense(model, g, h, "enc.logits")?;
    let c = CategoricalPosterior::from_logits(g, logits)?;
    let z = DiagonalGaussian::new(g, z_mu, z_logvar)?;

    let (d, pr) = (cfg.discrete_dim, cfg.private_dim);
    let w = match cfg.variant {
        Variant::Joint => None,
        Variant::Exact => {
            // One pass per class, each conditioned on e_i and keeping only block i.
            let mut mus = Vec::with_capacity(d);
            let mut logvars = Vec::with_capacity(d);
            for i in 0..d {
                let e_i = g.constant(super::one_hot(&vec![i; batch], d));
                let inp = g.concat(&[h, e_i], 1)?;
                let mu = dense(model, g, inp, "enc.w_mu")?;
                let lv = dense(model, g, inp, "enc.w_logvar")?;
                mus.push(g.narrow(mu, 1, i * pr, pr)?);
                logvars.push(g.narrow(lv, 1, i * pr, pr)?);
            }
            let mu = g.concat(&mus, 1)?;
            let lv = g.concat(&logvars, 1)?;
            let mu = g.reshape(mu, &[batch, d, pr])?;
            let lv = g.reshape(lv, &[batch, d, pr])?;
            Some(DiagonalGaussian::new(g, mu, lv)?)
        }
        Variant::Approx => {
            let inp = g.concat(&[h, c.probs], 1)?;
            let mu = dense(model, g, inp, "enc.w_mu")?;
            let lv = dense(model, g, inp, "enc.w_logvar")?;
            let mu = g.reshape(mu, &[batch, d, pr])?;
            let lv = g.reshape(lv, &[batch, d, pr])?;
            Some(DiagonalGaussian::new(g, mu, lv)?)
        }
    };
    Ok(EncoderOutput { z, w, c })
}

pub(super) fn decode(model: &Model, g: &mut Graph, sample: &LatentSample) -> Result<Var> {
    let cfg = &model.config;
    let batch = g.shape(sample.z)[0];
    let expect = |g: &Graph, v: Var, shape: &[usize], what: &str| -> Result<()> {
        if g.shape(v) != shape {
            return Err(Error::shape(
                "decode",
                format!("{what}: expected {shape:?}, got {:?}", g.shape(v)),
            ));
        }
        Ok(())
    };
    expect(g, sample.z, &[batch, cfg.public_dim], "z")?;
    expect(g, sample.discrete, &[batch, cfg.discrete_dim], "discrete")?;
    let w = match (cfg.has_private(), sample.w) {
        (true, Some(w)) => {
            expect(g, w, &[batch, cfg.private_dim], "w")?;
            Some(w)
        }
        (false, None) => None,
        (true, None) => return Err(Error::shape("decode", "sample lacks the private variable")),
        (false, Some(_)) => return Err(Error::shape("decode", "joint variant takes no private variable")),
    };

    let h = match (cfg.variant, w) {
        (Variant::Exact, Some(w)) => {
            let public = dense_relu(model, g, sample.z, "dec.pub")?;
            let layout = block_layout(g, w, sample.discrete)?;
            let private = dense_relu(model, g, layout, "dec.priv")?;
            g.concat(&[public, private], 1)?
        }
        (_, w) => {
            let mut parts = vec![sample.z];
            parts.extend(w);
            parts.push(sample.discrete);
            let inp = g.concat(&parts, 1)?;
            dense_relu(model, g, inp, "dec.in")?
        }
    };
    let e = cfg.image_extent;
    match cfg.backbone {
        Backbone::Conv => {
            let h = dense_relu(model, g, h, "dec.fc")?;
            let mut h = g.reshape(h, &[batch, TRUNK_CHANNELS, TRUNK_EXTENT, TRUNK_EXTENT])?;
            if e == 64 {
                let y = deconv(model, g, h, "dec.deconv0")?;
                h = g.relu(y)?;
            }
            let y = deconv(model, g, h, "dec.deconv1")?;
            let h = g.relu(y)?;
            let y = deconv(model, g, h, "dec.deconv2")?;
            let h = g.relu(y)?;
            deconv(model, g, h, "dec.deconv3")
        }
        Backbone::Mlp { .. } => {
            let y = dense(model, g, h, "dec.out")?;
            g.reshape(y, &[batch, cfg.channels, e, e])
        }
    }
}
