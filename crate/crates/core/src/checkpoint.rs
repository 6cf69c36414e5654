//! AMCW model checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic "AMCW", u32 version, u8 variant tag
//! architecture: u32 in_channels, in_h, in_w, stem_channels, num_classes;
//!               u16 block count; per block u8 kind (0 = A, 1 = B),
//!               u32 channels_in, channels_out, u8 downsample
//! per conv unit (stem, then each block's conv1, conv2, shortcut):
//!     u32 x 8 conv geometry, u8 bias flag, u8 binary flag
//!     f64 weights (latent weights when binary)
//!     binary only: u32 word count, u64 words of the packed forward signs
//!     u8 rotation flag; if set: u32 n1, n2, f64 R1, R2 (row-major), beta, eta
//!     batch norm
//! head: batch norm, u8 binary flag, f64 weights [K x F], f64 bias [K]
//! 32-byte SHA-256 digest of the training log
//! batch norm = u32 channels, f64 gamma, beta, running mean, running var, eps, momentum
//! ```
//!
//! Loading rejects other versions, geometry that disagrees with the
//! architecture, packed signs that disagree with the stored weights, and
//! rotations that are not orthogonal.

use sha2::{Digest, Sha256};

use crate::binary::BitTensor;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{ArchSpec, BlockKind, BlockSpec, ConvBn, Model, ModelVariant};
use crate::nn::{BatchNorm, ConvSpec};
use crate::rotation::{split_sizes, RotationState};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"AMCW";
pub const FORMAT_VERSION: u32 = 1;
/// Largest accepted `||R^T R - I||_F` for stored rotations.
pub const ORTHOGONALITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub log_digest: [u8; 32],
}

/// SHA-256 of a training log's text.
pub fn log_digest(log_text: &str) -> [u8; 32] {
    Sha256::digest(log_text.as_bytes()).into()
}

pub fn save(model: &Model, log_digest: &[u8; 32]) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(MAGIC);
    w.u32(FORMAT_VERSION);
    w.u8(model.variant.tag());
    let a = &model.arch;
    for v in [
        a.in_channels,
        a.in_h,
        a.in_w,
        a.stem_channels,
        a.num_classes,
    ] {
        w.len32(v);
    }
    w.u16(u16::try_from(a.blocks.len()).map_err(|_| Error::config("too many blocks"))?);
    for b in &a.blocks {
        w.u8(match b.kind {
            BlockKind::A => 0,
            BlockKind::B => 1,
        });
        w.len32(b.channels_in);
        w.len32(b.channels_out);
        w.u8(u8::from(b.downsample));
    }
    for unit in model.units() {
        write_unit(&mut w, unit)?;
    }
    write_bn(&mut w, &model.head.bn);
    w.u8(u8::from(model.head.binary));
    w.f64s(model.head.weights.data());
    w.f64s(model.head.bias.data());
    w.bytes(log_digest);
    Ok(w.buf)
}

fn write_unit(w: &mut Writer, u: &ConvBn) -> Result<()> {
    let s = &u.spec;
    for v in [
        s.c_in, s.c_out, s.k_h, s.k_w, s.stride_h, s.stride_w, s.pad_h, s.pad_w,
    ] {
        w.len32(v);
    }
    w.u8(u8::from(s.has_bias));
    w.u8(u8::from(u.binary));
    w.f64s(u.weights.data());
    if u.binary {
        let bits = BitTensor::from_signs(&u.effective_weights()?);
        w.len32(bits.words().len());
        bits.words().iter().for_each(|&x| w.u64(x));
    }
    match &u.rotation {
        Some(r) => {
            w.u8(1);
            w.len32(r.n1);
            w.len32(r.n2);
            w.f64s(r.r1.data());
            w.f64s(r.r2.data());
            w.f64(r.beta);
            w.f64(r.eta);
        }
        None => w.u8(0),
    }
    write_bn(w, &u.bn);
    Ok(())
}

fn write_bn(w: &mut Writer, bn: &BatchNorm) {
    w.len32(bn.channels());
    w.f64s(&bn.gamma);
    w.f64s(&bn.beta);
    w.f64s(&bn.running_mean);
    w.f64s(&bn.running_var);
    w.f64(bn.eps);
    w.f64(bn.momentum);
}

fn flag(r: &mut Reader<'_>, what: &str) -> Result<bool> {
    let at = r.pos;
    match r.u8()? {
        0 => Ok(false),
        1 => Ok(true),
        v => Err(r.error(at, format!("{what} flag must be 0 or 1, found {v}"))),
    }
}

fn finite(r: &Reader<'_>, at: usize, what: &str, v: &[f64]) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(r.error(at, format!("{what} contains non-finite values")))
    }
}

fn read_bn(r: &mut Reader<'_>, channels: usize, what: &str) -> Result<BatchNorm> {
    let at = r.pos;
    let c = r.len32()?;
    if c != channels {
        return Err(r.error(
            at,
            format!("{what}: batch norm has {c} channels, expected {channels}"),
        ));
    }
    let at = r.pos;
    let bn = BatchNorm {
        gamma: r.f64s(c)?,
        beta: r.f64s(c)?,
        running_mean: r.f64s(c)?,
        running_var: r.f64s(c)?,
        eps: r.f64()?,
        momentum: r.f64()?,
    };
    finite(r, at, what, &bn.gamma)?;
    finite(r, at, what, &bn.beta)?;
    finite(r, at, what, &bn.running_mean)?;
    let bad_var = |v: &f64| !v.is_finite() || *v < 0.0;
    if bn.running_var.iter().any(bad_var) || !bn.eps.is_finite() || bn.eps <= 0.0 {
        return Err(r.error(
            at,
            format!("{what}: invalid batch norm variance or epsilon"),
        ));
    }
    Ok(bn)
}

fn read_unit(
    r: &mut Reader<'_>,
    name: &str,
    expected: &ConvSpec,
    binary: bool,
    rotated: bool,
) -> Result<ConvBn> {
    let at = r.pos;
    let mut g = [0usize; 8];
    for v in &mut g {
        *v = r.len32()?;
    }
    let spec = ConvSpec {
        c_in: g[0],
        c_out: g[1],
        k_h: g[2],
        k_w: g[3],
        stride_h: g[4],
        stride_w: g[5],
        pad_h: g[6],
        pad_w: g[7],
        has_bias: flag(r, "bias")?,
    };
    if spec != *expected {
        return Err(r.error(
            at,
            format!("{name}: stored geometry {spec:?} disagrees with the architecture"),
        ));
    }
    let at = r.pos;
    if flag(r, "binary")? != binary {
        return Err(r.error(
            at,
            format!("{name}: binary flag disagrees with the variant"),
        ));
    }
    let at = r.pos;
    let weights = Tensor::new(&spec.weight_shape(), r.f64s(spec.weight_len())?)?;
    finite(r, at, name, weights.data())?;
    if binary && weights.data().iter().any(|x| x.abs() > 1.0) {
        return Err(r.error(at, format!("{name}: latent weights outside [-1, 1]")));
    }
    let packed = if binary {
        let at = r.pos;
        let words = r.len32()?;
        let data = (0..words).map(|_| r.u64()).collect::<Result<Vec<_>>>()?;
        Some((
            at,
            BitTensor::from_words(&spec.weight_shape(), data)
                .map_err(|e| r.error(at, format!("{name}: {e}")))?,
        ))
    } else {
        None
    };
    let at = r.pos;
    let rotation = if flag(r, "rotation")? {
        let n1 = r.len32()?;
        let n2 = r.len32()?;
        if (n1, n2) != split_sizes(spec.weight_len()) {
            return Err(r.error(
                at,
                format!("{name}: rotation split {n1}x{n2} does not match the layer"),
            ));
        }
        let r1 = Tensor::new(&[n1, n1], r.f64s(n1 * n1)?)?;
        let r2 = Tensor::new(&[n2, n2], r.f64s(n2 * n2)?)?;
        let beta = r.f64()?;
        let eta = r.f64()?;
        let state = RotationState {
            n1,
            n2,
            r1,
            r2,
            beta,
            eta,
        };
        finite(r, at, name, state.r1.data())?;
        finite(r, at, name, state.r2.data())?;
        finite(r, at, name, &[beta, eta])?;
        let err = state.orthogonality_error();
        if err > ORTHOGONALITY_TOL {
            return Err(r.error(
                at,
                format!("{name}: rotation is not orthogonal (error {err:e})"),
            ));
        }
        Some(state)
    } else {
        None
    };
    if rotation.is_some() != rotated {
        return Err(r.error(
            at,
            format!("{name}: rotation presence disagrees with the variant"),
        ));
    }
    let bn = read_bn(r, spec.c_out, name)?;
    let unit = ConvBn {
        spec,
        binary,
        weights,
        rotation,
        bn,
    };
    if let Some((at, bits)) = packed {
        if bits != BitTensor::from_signs(&unit.effective_weights()?) {
            return Err(r.error(
                at,
                format!("{name}: packed signs disagree with the stored weights"),
            ));
        }
    }
    Ok(unit)
}

pub fn load(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader::new(bytes);
    let magic = r.array::<4>()?;
    if &magic != MAGIC {
        return Err(r.error(0, format!("expected magic \"AMCW\", found {magic:?}")));
    }
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(r.error(
            4,
            format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})"),
        ));
    }
    let tag = r.u8()?;
    let variant = ModelVariant::from_tag(tag)
        .ok_or_else(|| r.error(8, format!("unknown variant tag {tag}")))?;

    let at = r.pos;
    let mut dims = [0usize; 5];
    for d in &mut dims {
        *d = r.len32()?;
    }
    let n_blocks = r.u16()?;
    let mut blocks = Vec::with_capacity(n_blocks.into());
    for _ in 0..n_blocks {
        let kat = r.pos;
        let kind = match r.u8()? {
            0 => BlockKind::A,
            1 => BlockKind::B,
            k => return Err(r.error(kat, format!("unknown block kind {k}"))),
        };
        let channels_in = r.len32()?;
        let channels_out = r.len32()?;
        let downsample = flag(&mut r, "downsample")?;
        blocks.push(BlockSpec {
            kind,
            channels_in,
            channels_out,
            downsample,
        });
    }
    let arch = ArchSpec {
        in_channels: dims[0],
        in_h: dims[1],
        in_w: dims[2],
        stem_channels: dims[3],
        num_classes: dims[4],
        blocks,
    };
    arch.validate()
        .map_err(|e| r.error(at, format!("invalid architecture: {e}")))?;

    let stem = read_unit(
        &mut r,
        "stem",
        &arch.stem(),
        variant.binarizes_stem(),
        false,
    )?;
    let (bin, rot) = (variant.binarizes_blocks(), variant.rotates());
    let mut model_blocks = Vec::with_capacity(arch.blocks.len());
    for (i, spec) in arch.blocks.iter().enumerate() {
        let name = |part: &str| format!("block{}.{part}", i + 1);
        let conv1 = read_unit(&mut r, &name("conv1"), &spec.conv1(), bin, rot)?;
        let conv2 = read_unit(&mut r, &name("conv2"), &spec.conv2(), bin, rot)?;
        let shortcut = match spec.shortcut() {
            Some(s) => Some(read_unit(&mut r, &name("shortcut"), &s, bin, rot)?),
            None => None,
        };
        model_blocks.push(crate::model::Block {
            spec: *spec,
            conv1,
            conv2,
            shortcut,
        });
    }
    let f = arch.feature_channels();
    let k = arch.num_classes;
    let bn = read_bn(&mut r, f, "head")?;
    let at = r.pos;
    let binary = flag(&mut r, "head binary")?;
    if binary != variant.binarizes_classifier() {
        return Err(r.error(at, "classifier binary flag disagrees with the variant"));
    }
    let at = r.pos;
    let weights = Tensor::new(&[k, f], r.f64s(k * f)?)?;
    let bias = Tensor::new(&[k], r.f64s(k)?)?;
    finite(&r, at, "classifier", weights.data())?;
    finite(&r, at, "classifier", bias.data())?;
    let log_digest = r.array::<32>()?;
    r.finish()?;
    Ok(Checkpoint {
        model: Model {
            variant,
            arch,
            stem,
            blocks: model_blocks,
            head: crate::model::Head {
                bn,
                weights,
                bias,
                binary,
            },
        },
        log_digest,
    })
}

/// Re-tags a trained real model as a binary variant: its weights become the
/// latent weights (clipped to `[-1, 1]`). For RBNN one rotation solve is run
/// per binarized layer, starting from the identity.
pub fn convert(model: &Model, to: ModelVariant) -> Result<Model> {
    if model.variant != ModelVariant::Real {
        return Err(Error::config(format!(
            "only real checkpoints can be converted, this one is {}",
            model.variant
        )));
    }
    if !matches!(
        to,
        ModelVariant::Bnn | ModelVariant::Bnn2Real | ModelVariant::Rbnn
    ) {
        return Err(Error::config(format!("cannot convert to {to}")));
    }
    let mut out = model.clone();
    out.variant = to;
    let bin_stem = to.binarizes_stem();
    for (i, unit) in out.units_mut().into_iter().enumerate() {
        let binary = if i == 0 { bin_stem } else { true };
        if !binary {
            continue;
        }
        unit.binary = true;
        unit.weights = crate::binary::clip_latent(&unit.weights);
        if to.rotates() {
            let start = RotationState::identity(unit.weights.len());
            unit.rotation = Some(crate::rotation::learn_rotation(&unit.weights, &start)?.state);
        }
    }
    if to.binarizes_classifier() {
        out.head.binary = true;
        out.head.weights = crate::binary::clip_latent(&out.head.weights);
        out.head.bias = crate::binary::clip_latent(&out.head.bias);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build, Engine};
    use crate::rng::{stream, uniform_tensor};

    fn arch() -> ArchSpec {
        let mut a = ArchSpec::with_base_width(2, 3);
        a.in_w = 32;
        a
    }

    #[test]
    fn round_trip_every_variant() {
        let x = uniform_tensor(&arch().input_shape(3), -1.0, 1.0, &mut stream(1, &[]));
        for v in ModelVariant::ALL {
            let mut m = build(v, &arch(), 7).unwrap();
            let unit = &mut m.blocks[0].conv1;
            if let Some(rot) = &mut unit.rotation {
                *rot = crate::rotation::learn_rotation(&unit.weights, rot)
                    .unwrap()
                    .state;
                rot.beta = 0.3;
            }
            let digest = log_digest("epoch\n");
            let bytes = save(&m, &digest).unwrap();
            let ck = load(&bytes).unwrap();
            assert_eq!(ck.model, m);
            assert_eq!(ck.log_digest, digest);
            assert_eq!(
                ck.model.forward(&x, Engine::Packed).unwrap(),
                m.forward(&x, Engine::Packed).unwrap()
            );
            assert_eq!(save(&ck.model, &digest).unwrap(), bytes);
        }
    }

    #[test]
    fn rejects_bad_headers_and_truncation() {
        let m = build(ModelVariant::Rbnn, &arch(), 1).unwrap();
        let bytes = save(&m, &[0; 32]).unwrap();
        let mut bad = bytes.clone();
        bad[1] = b'X';
        assert!(matches!(load(&bad), Err(Error::Format { offset: 0, .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(load(&bad), Err(Error::Format { offset: 4, .. })));
        let mut bad = bytes.clone();
        bad[8] = 77;
        assert!(load(&bad).is_err());
        assert!(matches!(
            load(&bytes[..bytes.len() - 1]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(load(&long), Err(Error::Format { .. })));
    }

    #[test]
    fn rejects_non_orthogonal_rotation() {
        let mut m = build(ModelVariant::Rbnn, &arch(), 1).unwrap();
        let rot = m.blocks[0].conv1.rotation.as_mut().unwrap();
        rot.r1.data_mut()[0] = 1.5;
        let bytes = save(&m, &[0; 32]).unwrap();
        match load(&bytes) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("orthogonal"), "{message}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_tampered_weights() {
        let m = build(ModelVariant::Bnn, &arch(), 1).unwrap();
        let mut bytes = save(&m, &[0; 32]).unwrap();
        // Flip the sign of the stem's first latent weight (after the 8 x u32
        // geometry and two flags that follow the architecture block).
        let header = 4 + 4 + 1 + 5 * 4 + 2 + arch().blocks.len() * 10;
        let w0 = header + 8 * 4 + 2;
        bytes[w0 + 7] ^= 0x80;
        match load(&bytes) {
            Err(Error::Format { message, .. }) => {
                assert!(message.contains("packed signs"), "{message}")
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn convert_real_to_binary() {
        let real = build(ModelVariant::Real, &arch(), 2).unwrap();
        for to in [
            ModelVariant::Bnn,
            ModelVariant::Bnn2Real,
            ModelVariant::Rbnn,
        ] {
            let c = convert(&real, to).unwrap();
            assert_eq!(c.variant, to);
            let back = load(&save(&c, &[0; 32]).unwrap()).unwrap();
            assert_eq!(back.model, c);
            for u in c.units().skip(1) {
                assert!(u.binary);
                assert_eq!(u.rotation.is_some(), to == ModelVariant::Rbnn);
            }
        }
        assert!(convert(&real, ModelVariant::Real).is_err());
        let bnn = convert(&real, ModelVariant::Bnn).unwrap();
        assert!(convert(&bnn, ModelVariant::Rbnn).is_err());
    }
}
