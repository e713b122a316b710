//! Versioned on-disk format: a line-oriented text header describing the
//! topology, terminated by `end`, followed by the weights as little-endian
//! f64. Header floats use Rust's shortest round-trip formatting.

use std::io::{BufRead, Write};
use std::path::Path;

use super::layer::{ActivationQuant, LayerSpec, Projection};
use super::network::{LossKind, Network, QuantMeta};
use crate::error::{Error, Result};

const MAGIC: &str = "nvcim-net v1";

fn flag(b: bool) -> u8 {
    b as u8
}

fn layer_line(layer: &LayerSpec) -> String {
    match *layer {
        LayerSpec::FullyConnected {
            inputs,
            outputs,
            bias,
        } => format!("fc {inputs} {outputs} {}", flag(bias)),
        LayerSpec::Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            bias,
        } => format!(
            "conv {in_channels} {out_channels} {kernel} {stride} {padding} {}",
            flag(bias)
        ),
        LayerSpec::Relu { quant: None } => "relu".into(),
        LayerSpec::Relu { quant: Some(q) } => format!("relu {} {}", q.bits, q.ceiling),
        LayerSpec::MaxPool { size, stride } => format!("maxpool {size} {stride}"),
        LayerSpec::AvgPool { size, stride } => format!("avgpool {size} {stride}"),
        LayerSpec::Flatten => "flatten".into(),
        LayerSpec::BatchNormFolded { channels } => format!("bn {channels}"),
        LayerSpec::ResidualAdd {
            source,
            projection: None,
        } => format!("residual {source}"),
        LayerSpec::ResidualAdd {
            source,
            projection: Some(p),
        } => format!(
            "residual {source} {} {} {}",
            p.in_channels, p.out_channels, p.stride
        ),
    }
}

pub fn write_network<W: Write>(net: &Network, mut out: W) -> Result<()> {
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    let dims: Vec<String> = net.input_shape().iter().map(|d| d.to_string()).collect();
    header.push_str(&format!("input {}\n", dims.join(" ")));
    header.push_str(&format!("loss {}\n", net.loss_kind().name()));
    if let Some(q) = net.quant() {
        header.push_str(&format!(
            "quant {} {} {} {}\n",
            q.weight_bits, q.device_bits, q.w_max, q.clipped
        ));
    }
    for layer in net.layers() {
        header.push_str("layer ");
        header.push_str(&layer_line(layer));
        header.push('\n');
    }
    header.push_str(&format!("weights {}\nend\n", net.weight_count()));
    out.write_all(header.as_bytes())?;
    let mut blob = Vec::with_capacity(net.weight_count() * 8);
    for w in net.weights() {
        blob.extend_from_slice(&w.to_le_bytes());
    }
    out.write_all(&blob)?;
    out.flush()?;
    Ok(())
}

struct Fields<'a> {
    line: usize,
    parts: std::str::SplitWhitespace<'a>,
}

impl Fields<'_> {
    fn err(&self, reason: impl Into<String>) -> Error {
        Error::Manifest {
            line: self.line,
            reason: reason.into(),
        }
    }

    fn next<T: std::str::FromStr>(&mut self, what: &str) -> Result<T> {
        let tok = self.parts.next().ok_or_else(|| self.err(format!("missing {what}")))?;
        tok.parse()
            .map_err(|_| self.err(format!("bad {what} `{tok}`")))
    }

    fn opt<T: std::str::FromStr>(&mut self, what: &str) -> Result<Option<T>> {
        match self.parts.next() {
            None => Ok(None),
            Some(tok) => tok
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("bad {what} `{tok}`"))),
        }
    }

    fn bool(&mut self, what: &str) -> Result<bool> {
        match self.next::<u8>(what)? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(self.err(format!("bad {what} `{v}`"))),
        }
    }

    fn done(mut self) -> Result<()> {
        match self.parts.next() {
            None => Ok(()),
            Some(tok) => Err(self.err(format!("unexpected token `{tok}`"))),
        }
    }
}

fn parse_layer(f: &mut Fields<'_>) -> Result<LayerSpec> {
    let kind: String = f.next("layer kind")?;
    Ok(match kind.as_str() {
        "fc" => LayerSpec::FullyConnected {
            inputs: f.next("inputs")?,
            outputs: f.next("outputs")?,
            bias: f.bool("bias")?,
        },
        "conv" => LayerSpec::Conv2d {
            in_channels: f.next("in_channels")?,
            out_channels: f.next("out_channels")?,
            kernel: f.next("kernel")?,
            stride: f.next("stride")?,
            padding: f.next("padding")?,
            bias: f.bool("bias")?,
        },
        "relu" => match f.opt::<u32>("bits")? {
            None => LayerSpec::Relu { quant: None },
            Some(bits) => LayerSpec::Relu {
                quant: Some(ActivationQuant {
                    bits,
                    ceiling: f.next("ceiling")?,
                }),
            },
        },
        "maxpool" => LayerSpec::MaxPool {
            size: f.next("size")?,
            stride: f.next("stride")?,
        },
        "avgpool" => LayerSpec::AvgPool {
            size: f.next("size")?,
            stride: f.next("stride")?,
        },
        "flatten" => LayerSpec::Flatten,
        "bn" => LayerSpec::BatchNormFolded {
            channels: f.next("channels")?,
        },
        "residual" => {
            let source = f.next("source")?;
            let projection = match f.opt::<usize>("in_channels")? {
                None => None,
                Some(in_channels) => Some(Projection {
                    in_channels,
                    out_channels: f.next("out_channels")?,
                    stride: f.next("stride")?,
                }),
            };
            LayerSpec::ResidualAdd { source, projection }
        }
        other => return Err(f.err(format!("unknown layer kind `{other}`"))),
    })
}

pub fn read_network<R: BufRead>(mut input: R) -> Result<Network> {
    let mut input_shape = None;
    let mut loss = None;
    let mut quant = None;
    let mut layers = Vec::new();
    let mut count = None;
    let mut line_no = 0;
    let mut buf = String::new();
    loop {
        buf.clear();
        line_no += 1;
        if input.read_line(&mut buf)? == 0 {
            return Err(Error::Manifest {
                line: line_no,
                reason: "unexpected end of header".into(),
            });
        }
        let line = buf.trim_end_matches(['\n', '\r']);
        if line_no == 1 {
            if line != MAGIC {
                return Err(Error::Manifest {
                    line: 1,
                    reason: format!("expected `{MAGIC}`, found `{line}`"),
                });
            }
            continue;
        }
        let mut f = Fields {
            line: line_no,
            parts: line.split_whitespace(),
        };
        let key: String = f.next("key")?;
        match key.as_str() {
            "input" => {
                let mut dims = Vec::new();
                while let Some(d) = f.opt::<usize>("dimension")? {
                    dims.push(d);
                }
                input_shape = Some(dims);
                continue;
            }
            "loss" => {
                let name: String = f.next("loss")?;
                loss = Some(name.parse::<LossKind>()?);
            }
            "quant" => {
                quant = Some(QuantMeta {
                    weight_bits: f.next("weight_bits")?,
                    device_bits: f.next("device_bits")?,
                    w_max: f.next("w_max")?,
                    clipped: f.next("clipped")?,
                });
            }
            "layer" => layers.push(parse_layer(&mut f)?),
            "weights" => count = Some(f.next::<usize>("count")?),
            "end" => {
                f.done()?;
                break;
            }
            other => return Err(f.err(format!("unknown key `{other}`"))),
        }
        f.done()?;
    }
    let missing = |what: &str| Error::Manifest {
        line: line_no,
        reason: format!("header lacks `{what}`"),
    };
    let input_shape = input_shape.ok_or_else(|| missing("input"))?;
    let loss = loss.ok_or_else(|| missing("loss"))?;
    let count = count.ok_or_else(|| missing("weights"))?;
    let mut net = Network::new(input_shape, layers, loss)?;
    if count != net.weight_count() {
        return Err(Error::WeightCount {
            expected: net.weight_count(),
            found: count,
        });
    }
    let mut blob = vec![0u8; count * 8];
    input.read_exact(&mut blob)?;
    let mut extra = [0u8; 1];
    if input.read(&mut extra)? != 0 {
        return Err(Error::Manifest {
            line: line_no,
            reason: "trailing bytes after weight blob".into(),
        });
    }
    let weights = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    net.set_weights(weights)?;
    net.set_quant(quant);
    Ok(net)
}

pub fn save_network(net: &Network, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_network(net, std::io::BufWriter::new(file))
}

pub fn load_network(path: &Path) -> Result<Network> {
    let file = std::fs::File::open(path)?;
    read_network(std::io::BufReader::new(file))
}
