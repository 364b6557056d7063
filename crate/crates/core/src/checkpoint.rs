//! Full training state and its "DMMC" file format.
//!
//! Little-endian, versioned, made of tagged sections:
//!
//! ```text
//! magic "DMMC" | version u16 | sections...
//! section: tag [u8; 4] | length u64 | payload
//! ```
//!
//! Sections: `CONF` (TOML training config), `NETS` (network tensors),
//! `CODE` (codes and EMA state), `ETFM` (frame seed and matrix), `CLSF`
//! (probability head), `ADAM` (optimizer moments), `EPOC` (next epoch),
//! `RNGS` (sampler state). Tensors are `rank u32 | dims u32... | f32...`.

use std::fs;
use std::path::Path;

use rand_chacha::ChaCha8Rng;

use crate::codebook::Codebook;
use crate::error::{DmmError, Result};
use crate::etf::EtfClassifier;
use crate::io::{put_f32s, ByteReader};
use crate::ndcore::Tensor;
use crate::networks::{Dense, DmmModel, Mlp};
use crate::optim::Adam;
use crate::train::{optimizer_sizes, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"DMMC";
pub const CHECKPOINT_VERSION: u16 = 1;

const SECTIONS: [&[u8; 4]; 8] = [b"CONF", b"NETS", b"CODE", b"ETFM", b"CLSF", b"ADAM", b"EPOC", b"RNGS"];

/// Everything needed to resume training bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: DmmModel,
    pub optimizer: Adam,
    pub rng: ChaCha8Rng,
    /// Next epoch to run.
    pub epoch: usize,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());

        let conf = toml::to_string(&self.config)
            .map_err(|e| DmmError::Config(format!("cannot serialize config: {e}")))?;
        section(&mut out, b"CONF", conf.as_bytes());

        let mut nets = Vec::new();
        let tensors = self.model.network_tensors();
        nets.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for t in tensors {
            put_tensor(&mut nets, t);
        }
        section(&mut out, b"NETS", &nets);

        let cb = &self.model.codebook;
        let mut code = Vec::new();
        put_tensor(&mut code, cb.codes());
        put_tensor(&mut code, cb.accumulators());
        put_f32s(&mut code, cb.counts());
        put_f32s(&mut code, &[cb.tau(), cb.kappa()]);
        section(&mut out, b"CODE", &code);

        let mut etf = Vec::new();
        etf.extend_from_slice(&self.model.etf.seed().to_le_bytes());
        put_tensor(&mut etf, self.model.etf.matrix());
        section(&mut out, b"ETFM", &etf);

        let mut clsf = Vec::new();
        put_tensor(&mut clsf, &self.model.classifier);
        section(&mut out, b"CLSF", &clsf);

        let mut adam = Vec::new();
        adam.extend_from_slice(&self.optimizer.step_count().to_le_bytes());
        adam.extend_from_slice(&(self.optimizer.slots() as u32).to_le_bytes());
        for (m, v) in self.optimizer.first_moments().iter().zip(self.optimizer.second_moments()) {
            adam.extend_from_slice(&(m.len() as u64).to_le_bytes());
            put_f32s(&mut adam, m);
            put_f32s(&mut adam, v);
        }
        section(&mut out, b"ADAM", &adam);

        section(&mut out, b"EPOC", &(self.epoch as u64).to_le_bytes());

        let mut rng = Vec::new();
        rng.extend_from_slice(&self.rng.get_seed());
        rng.extend_from_slice(&self.rng.get_stream().to_le_bytes());
        rng.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        section(&mut out, b"RNGS", &rng);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(DmmError::Format {
                offset: 0,
                detail: "bad magic, not a DMMC checkpoint".into(),
            });
        }
        let version = r.u16()?;
        if version != CHECKPOINT_VERSION {
            return Err(DmmError::UnsupportedVersion {
                what: "checkpoint",
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let mut found: [Option<(u64, &[u8])>; 8] = [None; 8];
        while r.remaining() > 0 {
            let at = r.offset();
            let tag = r.take(4)?;
            let len = r.u64()?;
            let payload_at = r.offset();
            let payload = r.take(usize::try_from(len).unwrap_or(usize::MAX))?;
            let slot = SECTIONS.iter().position(|t| t.as_slice() == tag).ok_or_else(|| DmmError::Format {
                offset: at,
                detail: format!("unknown section {:?}", String::from_utf8_lossy(tag)),
            })?;
            if found[slot].is_some() {
                return Err(DmmError::Format {
                    offset: at,
                    detail: format!("duplicate section {}", String::from_utf8_lossy(tag)),
                });
            }
            found[slot] = Some((payload_at, payload));
        }
        let mut sections = Vec::with_capacity(8);
        for (slot, s) in found.into_iter().enumerate() {
            let s = s.ok_or_else(|| DmmError::Format {
                offset: bytes.len() as u64,
                detail: format!("missing section {}", String::from_utf8_lossy(SECTIONS[slot])),
            })?;
            sections.push(s);
        }
        let reader = |k: usize| Section::new(sections[k].0, sections[k].1);

        let conf = reader(0);
        let text = std::str::from_utf8(conf.bytes).map_err(|_| conf.error(0, "config is not UTF-8"))?;
        let config: TrainConfig = toml::from_str(text).map_err(|e| conf.error(0, &format!("bad config: {e}")))?;
        config.validate()?;
        let dims = config.dims.clone();

        let mut nets = reader(1);
        let count = nets.r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            tensors.push(get_tensor(&mut nets.r)?);
        }
        nets.finish()?;
        let layer_counts = [
            dims.encoder_hidden.len() + 1,
            dims.encoder_hidden.len() + 1,
            dims.generator_hidden.len() + 1,
        ];
        if tensors.len() != 2 * layer_counts.iter().sum::<usize>() {
            return Err(nets.error(0, &format!("{} network tensors do not match the dims", tensors.len())));
        }
        let mut it = tensors.into_iter();
        let mut take_mlp = |layers: usize| Mlp {
            layers: (0..layers)
                .map(|_| Dense {
                    weight: it.next().unwrap(),
                    bias: it.next().unwrap(),
                })
                .collect(),
        };
        let networks = layer_counts.map(&mut take_mlp);

        let mut code = reader(2);
        let codes = get_tensor(&mut code.r)?;
        let accum = get_tensor(&mut code.r)?;
        let counts = code.r.f32s(dims.codes)?;
        let tk = code.r.f32s(2)?;
        code.finish()?;
        let codebook = Codebook::from_parts(codes, counts, accum, tk[0], tk[1])?;

        let mut etf = reader(3);
        let seed = etf.r.u64()?;
        let matrix = get_tensor(&mut etf.r)?;
        etf.finish()?;

        let mut clsf = reader(4);
        let classifier = get_tensor(&mut clsf.r)?;
        clsf.finish()?;

        let model = DmmModel::from_parts(dims, networks, EtfClassifier::from_parts(matrix, seed), classifier, codebook)?;

        let mut adam = reader(5);
        let step = adam.r.u64()?;
        let slots = adam.r.u32()? as usize;
        let (mut first, mut second) = (Vec::new(), Vec::new());
        for _ in 0..slots {
            let n = adam.r.u64()? as usize;
            first.push(adam.r.f32s(n)?);
            second.push(adam.r.f32s(n)?);
        }
        adam.finish()?;
        let optimizer = Adam::from_parts(step, first, second)?;
        let want: Vec<usize> = optimizer_sizes(&model);
        let have: Vec<usize> = optimizer.first_moments().iter().map(Vec::len).collect();
        if want != have {
            return Err(adam.error(0, "optimizer slots do not match the model"));
        }

        let mut epoc = reader(6);
        let epoch = epoc.r.u64()? as usize;
        epoc.finish()?;

        let mut rngs = reader(7);
        let seed: [u8; 32] = rngs.r.take(32)?.try_into().unwrap();
        let stream = rngs.r.u64()?;
        let word_pos = u128::from_le_bytes(rngs.r.take(16)?.try_into().unwrap());
        rngs.finish()?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);

        Ok(Self {
            config,
            model,
            optimizer,
            rng,
            epoch,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| DmmError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| DmmError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| DmmError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn put_tensor(out: &mut Vec<u8>, t: &Tensor) {
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    put_f32s(out, t.data());
}

fn get_tensor(r: &mut ByteReader<'_>) -> Result<Tensor> {
    let at = r.offset();
    let rank = r.u32()? as usize;
    if rank == 0 || rank > 4 {
        return Err(DmmError::Format {
            offset: at,
            detail: format!("tensor rank {rank}"),
        });
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.u32()? as usize);
    }
    let n = shape.iter().product();
    Tensor::new(&shape, r.f32s(n)?)
}

/// Payload reader that reports offsets relative to the whole file.
struct Section<'a> {
    base: u64,
    bytes: &'a [u8],
    r: ByteReader<'a>,
}

impl<'a> Section<'a> {
    fn new(base: u64, bytes: &'a [u8]) -> Self {
        Self {
            base,
            bytes,
            r: ByteReader::with_base(bytes, base),
        }
    }

    /// Error at `at` bytes into the section.
    fn error(&self, at: u64, detail: &str) -> DmmError {
        DmmError::Format {
            offset: self.base + at,
            detail: detail.into(),
        }
    }

    fn finish(&self) -> Result<()> {
        if self.r.remaining() != 0 {
            return Err(self.error(self.r.offset() - self.base, "unexpected bytes at the end of a section"));
        }
        Ok(())
    }
}
