//! Binary checkpoints: a short text header followed by raw little-endian
//! f64 parameters (generator then discriminator, each layer weight then
//! bias, then modulation scalars when present).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::models::{build_filter_layout, Arch, Gan, Net, NetworkId};
use crate::rng::{stream, Stream};
use crate::scheduler::MemoryBank;
use crate::tensor::Tensor;

const MAGIC: &str = "rick-checkpoint 1";
const END: &str = "end";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub gan: Gan,
    pub bank: Option<MemoryBank>,
    pub iteration: usize,
    pub seed: u64,
}

fn width_of(gan: &Gan) -> usize {
    match gan.arch {
        Arch::PointMlp => gan.generator.layers[0].outputs(),
        Arch::IconConv => gan.generator.layers[1].outputs(),
    }
}

fn shape_str(t: &Tensor) -> String {
    t.shape()
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

fn net_tensors(net: &Net) -> Vec<&Tensor> {
    let mut v = net.param_tensors();
    for l in &net.layers {
        if let Some(m) = l.modulation.as_ref() {
            v.push(m);
        }
    }
    v
}

fn net_tensors_mut(net: &mut Net) -> Vec<&mut Tensor> {
    let mut params = Vec::new();
    let mut mods = Vec::new();
    for l in &mut net.layers {
        params.push(&mut l.weight);
        params.push(&mut l.bias);
        if let Some(m) = l.modulation.as_mut() {
            mods.push(m);
        }
    }
    params.extend(mods);
    params
}

impl Checkpoint {
    pub fn new(gan: Gan, bank: Option<MemoryBank>, iteration: usize, seed: u64) -> Self {
        Checkpoint {
            gan,
            bank,
            iteration,
            seed,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let gan = &self.gan;
        let layout = build_filter_layout(gan);
        let mut h = String::new();
        h.push_str(MAGIC);
        h.push('\n');
        h.push_str(&format!("arch {}\n", gan.arch));
        h.push_str(&format!("latent_dim {}\n", gan.latent_dim));
        h.push_str(&format!("width {}\n", width_of(gan)));
        h.push_str(&format!(
            "modulation {}\n",
            u8::from(gan.generator.has_modulation() || gan.discriminator.has_modulation())
        ));
        h.push_str(&format!(
            "filters {} {}\n",
            layout.count(NetworkId::Generator),
            layout.count(NetworkId::Discriminator)
        ));
        for id in [NetworkId::Generator, NetworkId::Discriminator] {
            let shapes: Vec<String> = net_tensors(gan.net(id))
                .into_iter()
                .map(shape_str)
                .collect();
            h.push_str(&format!("shapes {} {}\n", id.as_str(), shapes.join(" ")));
        }
        match &self.bank {
            Some(b) => h.push_str(&format!("bank {}\n", b.to_record())),
            None => h.push_str("bank -\n"),
        }
        h.push_str(&format!("iteration {}\n", self.iteration));
        h.push_str(&format!("seed {}\n", self.seed));
        h.push_str(END);
        h.push('\n');
        let mut out = h.into_bytes();
        for id in [NetworkId::Generator, NetworkId::Discriminator] {
            for t in net_tensors(gan.net(id)) {
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Format(m.to_string());
        let mut pos = 0;
        let mut lines = Vec::new();
        loop {
            let nl = bytes[pos..]
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&bytes[pos..pos + nl])
                .map_err(|_| bad("header is not UTF-8"))?;
            pos += nl + 1;
            if line == END {
                break;
            }
            lines.push(line.to_string());
        }
        if lines.first().map(String::as_str) != Some(MAGIC) {
            return Err(bad("not a checkpoint file"));
        }
        let field = |key: &str| -> Result<&str> {
            lines
                .iter()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix(' ')))
                .ok_or_else(|| Error::Format(format!("missing header field `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            field(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for `{key}`")))
        };
        let arch: Arch = field("arch")?.parse()?;
        let latent_dim = num("latent_dim")?;
        let width = num("width")?;
        let modulation = num("modulation")? == 1;
        let iteration = num("iteration")?;
        let seed: u64 = field("seed")?.parse().map_err(|_| bad("bad seed"))?;

        // parameters are overwritten below; the rng only fills placeholders
        let mut gan = Gan::with_width(arch, latent_dim, width, &mut stream(0, Stream::Init));
        if modulation {
            gan.generator.enable_modulation();
            gan.discriminator.enable_modulation();
        }
        let layout = build_filter_layout(&gan);
        let filters: Vec<usize> = field("filters")?
            .split(' ')
            .map(|s| s.parse().map_err(|_| bad("bad filter counts")))
            .collect::<Result<_>>()?;
        if filters
            != [
                layout.count(NetworkId::Generator),
                layout.count(NetworkId::Discriminator),
            ]
        {
            return Err(bad("filter layout does not match architecture"));
        }
        for id in [NetworkId::Generator, NetworkId::Discriminator] {
            let expect: Vec<String> = net_tensors(gan.net(id))
                .into_iter()
                .map(shape_str)
                .collect();
            let got = lines
                .iter()
                .find_map(|l| {
                    l.strip_prefix(&format!("shapes {} ", id.as_str()))
                        .map(str::to_string)
                })
                .ok_or_else(|| bad("missing shapes"))?;
            if got != expect.join(" ") {
                return Err(Error::Format(format!(
                    "shape mismatch for {}: {got}",
                    id.as_str()
                )));
            }
        }
        let bank = match field("bank")? {
            "-" => None,
            s => {
                let b = MemoryBank::from_record(s)?;
                if b.len() != layout.len() {
                    return Err(bad("bank length does not match layout"));
                }
                Some(b)
            }
        };

        let body = &bytes[pos..];
        let total: usize = [NetworkId::Generator, NetworkId::Discriminator]
            .iter()
            .map(|&id| {
                net_tensors(gan.net(id))
                    .iter()
                    .map(|t| t.numel())
                    .sum::<usize>()
            })
            .sum();
        if body.len() != total * 8 {
            return Err(Error::Format(format!(
                "expected {} parameter bytes, found {}",
                total * 8,
                body.len()
            )));
        }
        let mut values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
        for id in [NetworkId::Generator, NetworkId::Discriminator] {
            for t in net_tensors_mut(gan.net_mut(id)) {
                for v in t.data_mut() {
                    *v = values.next().expect("length checked");
                }
            }
        }
        Ok(Checkpoint {
            gan,
            bank,
            iteration,
            seed,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scheduler::Assignment;

    fn bits(g: &Gan) -> Vec<u64> {
        let mut v: Vec<u64> = g
            .generator
            .flat_params()
            .iter()
            .map(|x| x.to_bits())
            .collect();
        v.extend(g.discriminator.flat_params().iter().map(|x| x.to_bits()));
        v
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        for arch in [Arch::PointMlp, Arch::IconConv] {
            let mut gan = Gan::new(arch, 4, &mut stream(9, Stream::Init));
            gan.generator.layers[0].weight.data_mut()[0] = -0.0;
            gan.generator.layers[0].weight.data_mut()[1] = f64::MIN_POSITIVE / 4.0;
            let layout = build_filter_layout(&gan);
            let mut bank = MemoryBank::new(layout.len());
            bank.set(2, Assignment::Pruned).unwrap();
            bank.set(5, Assignment::Preserve).unwrap();
            let ck = Checkpoint::new(gan, Some(bank), 750, 42);
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            assert_eq!(bits(&back.gan), bits(&ck.gan));
            assert_eq!(back.bank, ck.bank);
            assert_eq!((back.iteration, back.seed), (750, 42));
            assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn modulation_survives() {
        let mut gan = Gan::new(Arch::PointMlp, 4, &mut stream(1, Stream::Init));
        gan.generator.enable_modulation();
        gan.discriminator.enable_modulation();
        gan.generator.layers[1]
            .modulation
            .as_mut()
            .unwrap()
            .data_mut()[3] = 0.25;
        let ck = Checkpoint::new(gan, None, 0, 0);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        assert_eq!(back.gan, ck.gan);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint::new(
            Gan::new(Arch::PointMlp, 4, &mut stream(1, Stream::Init)),
            None,
            0,
            0,
        );
        let bytes = ck.to_bytes();
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Format(_))
        ));
        assert!(Checkpoint::from_bytes(b"hello\nend\n").is_err());
        assert!(Checkpoint::from_bytes(b"no newline").is_err());
        let text = String::from_utf8_lossy(&bytes[..200]).replace("width 64", "width 65");
        assert!(Checkpoint::from_bytes(text.as_bytes()).is_err());
    }

    #[test]
    fn file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.ckpt");
        let ck = Checkpoint::new(
            Gan::new(Arch::IconConv, 4, &mut stream(3, Stream::Init)),
            None,
            5,
            6,
        );
        ck.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), ck);
        assert!(matches!(
            Checkpoint::load(&dir.path().join("missing")),
            Err(Error::Io { .. })
        ));
    }
}
