//! Text format for network architectures.
//!
//! ```text
//! ccgan-modelspec 1
//! network discriminator
//! image_channels 3
//! num_classes 10
//! dropout 0.5
//! activation relu
//! conv 64 3 1 1
//! maxpool 2
//! ```
//!
//! Generators use `encoder` / `decoder` lines holding `channels kernel stride pad`,
//! plus `input`, `resolution`, `noise_dim`, `projection` and `lowres` keys.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ccgan_core::models::{
    ConvLayer, DiscriminatorSpec, GeneratorInput, GeneratorSpec, HiddenActivation, LowresConditioning, LowresInjection,
    TrunkLayer,
};

use crate::config::parse_activation;
use crate::error::{Error, IoContext, Result};

const HEADER: &str = "ccgan-modelspec 1";

fn activation_name(a: HiddenActivation) -> String {
    match a {
        HiddenActivation::Relu => "relu".into(),
        HiddenActivation::LeakyRelu(s) => format!("leaky_relu:{s}"),
    }
}

fn layer_text(l: &ConvLayer) -> String {
    format!("{} {} {} {}", l.channels, l.kernel, l.stride, l.pad)
}

pub fn generator_to_text(spec: &GeneratorSpec) -> String {
    let mut s = format!("{HEADER}\nnetwork generator\n");
    let input = match spec.input {
        GeneratorInput::Context => "context",
        GeneratorInput::Noise => "noise",
    };
    let _ = writeln!(s, "image_channels {}", spec.image_channels);
    let _ = writeln!(s, "resolution {}", spec.resolution);
    let _ = writeln!(s, "input {input}");
    let _ = writeln!(s, "noise_dim {}", spec.noise_dim);
    let _ = writeln!(s, "activation {}", activation_name(spec.activation));
    match spec.projection {
        Some((c, size)) => writeln!(s, "projection {c} {size}"),
        None => writeln!(s, "projection -"),
    }
    .ok();
    match spec.lowres {
        Some(l) => {
            let inj = match l.injection {
                LowresInjection::Input => "input",
                LowresInjection::Bottleneck => "bottleneck",
            };
            writeln!(s, "lowres {} {inj}", l.factor)
        }
        None => writeln!(s, "lowres -"),
    }
    .ok();
    for l in &spec.encoder {
        let _ = writeln!(s, "encoder {}", layer_text(l));
    }
    for l in &spec.decoder {
        let _ = writeln!(s, "decoder {}", layer_text(l));
    }
    s
}

pub fn discriminator_to_text(spec: &DiscriminatorSpec) -> String {
    let mut s = format!("{HEADER}\nnetwork discriminator\n");
    let _ = writeln!(s, "image_channels {}", spec.image_channels);
    let _ = writeln!(s, "num_classes {}", spec.num_classes);
    let _ = writeln!(s, "dropout {}", spec.dropout);
    let _ = writeln!(s, "activation {}", activation_name(spec.activation));
    for l in &spec.trunk {
        let _ = match l {
            TrunkLayer::Conv(c) => writeln!(s, "conv {}", layer_text(c)),
            TrunkLayer::Pool(k) => writeln!(s, "maxpool {k}"),
        };
    }
    s
}

/// Lines after the header and network line, with 1-based line numbers.
fn body<'a>(text: &'a str, network: &str, origin: &str) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
        .filter(|(_, l)| !l.is_empty());
    match lines.next() {
        Some((_, l)) if l == HEADER => {}
        Some((n, l)) if l.starts_with("ccgan-modelspec") => {
            return Err(Error::format(origin, format!("line {n}: unsupported version '{l}'")))
        }
        _ => return Err(Error::format(origin, format!("missing '{HEADER}' header"))),
    }
    match lines.next() {
        Some((_, l)) if l == format!("network {network}") => {}
        Some((n, l)) => return Err(Error::format(origin, format!("line {n}: expected 'network {network}', got '{l}'"))),
        None => return Err(Error::format(origin, "missing network line")),
    }
    Ok(lines.map(|(n, l)| (n, l.split_whitespace().collect())).collect())
}

fn num<T: std::str::FromStr>(origin: &str, line: usize, s: &str) -> Result<T> {
    s.parse().map_err(|_| Error::format(origin, format!("line {line}: bad number '{s}'")))
}

fn layer(origin: &str, line: usize, f: &[&str]) -> Result<ConvLayer> {
    if f.len() != 4 {
        return Err(Error::format(origin, format!("line {line}: expected 'channels kernel stride pad'")));
    }
    Ok(ConvLayer::new(num(origin, line, f[0])?, num(origin, line, f[1])?, num(origin, line, f[2])?, num(origin, line, f[3])?))
}

pub fn parse_generator(text: &str, origin: &str) -> Result<GeneratorSpec> {
    let mut spec = GeneratorSpec::context(3, 0, &[]);
    spec.decoder.clear();
    for (n, f) in body(text, "generator", origin)? {
        let bad = || Error::format(origin, format!("line {n}: malformed '{}'", f.join(" ")));
        match (f[0], &f[1..]) {
            ("image_channels", [v]) => spec.image_channels = num(origin, n, v)?,
            ("resolution", [v]) => spec.resolution = num(origin, n, v)?,
            ("noise_dim", [v]) => spec.noise_dim = num(origin, n, v)?,
            ("input", ["context"]) => spec.input = GeneratorInput::Context,
            ("input", ["noise"]) => spec.input = GeneratorInput::Noise,
            ("activation", [v]) => spec.activation = parse_activation(v).map_err(|_| bad())?,
            ("projection", ["-"]) => spec.projection = None,
            ("projection", [c, s]) => spec.projection = Some((num(origin, n, c)?, num(origin, n, s)?)),
            ("lowres", ["-"]) => spec.lowres = None,
            ("lowres", [factor, inj]) => {
                let injection = match *inj {
                    "input" => LowresInjection::Input,
                    "bottleneck" => LowresInjection::Bottleneck,
                    _ => return Err(bad()),
                };
                spec.lowres = Some(LowresConditioning { factor: num(origin, n, factor)?, injection });
            }
            ("encoder", rest) => spec.encoder.push(layer(origin, n, rest)?),
            ("decoder", rest) => spec.decoder.push(layer(origin, n, rest)?),
            _ => return Err(bad()),
        }
    }
    spec.validate().map_err(|e| Error::format(origin, e.to_string()))?;
    Ok(spec)
}

pub fn parse_discriminator(text: &str, origin: &str) -> Result<DiscriminatorSpec> {
    let mut spec = DiscriminatorSpec::vgg(3, &[], 0);
    for (n, f) in body(text, "discriminator", origin)? {
        let bad = || Error::format(origin, format!("line {n}: malformed '{}'", f.join(" ")));
        match (f[0], &f[1..]) {
            ("image_channels", [v]) => spec.image_channels = num(origin, n, v)?,
            ("num_classes", [v]) => spec.num_classes = num(origin, n, v)?,
            ("dropout", [v]) => spec.dropout = num(origin, n, v)?,
            ("activation", [v]) => spec.activation = parse_activation(v).map_err(|_| bad())?,
            ("conv", rest) => spec.trunk.push(TrunkLayer::Conv(layer(origin, n, rest)?)),
            ("maxpool", [k]) => spec.trunk.push(TrunkLayer::Pool(num(origin, n, k)?)),
            _ => return Err(bad()),
        }
    }
    spec.validate().map_err(|e| Error::format(origin, e.to_string()))?;
    Ok(spec)
}

pub fn read_generator(path: &Path) -> Result<GeneratorSpec> {
    let text = fs::read_to_string(path).at(path)?;
    parse_generator(&text, &path.display().to_string())
}

pub fn read_discriminator(path: &Path) -> Result<DiscriminatorSpec> {
    let text = fs::read_to_string(path).at(path)?;
    parse_discriminator(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_round_trip() {
        let mut g = GeneratorSpec::default_64();
        g.lowres = Some(LowresConditioning { factor: 4, injection: LowresInjection::Bottleneck });
        g.activation = HiddenActivation::LeakyRelu(0.2);
        let text = generator_to_text(&g);
        assert_eq!(parse_generator(&text, "g").unwrap(), g);
        let n = GeneratorSpec::noise(3, 32, 100, &[128, 64, 32]);
        assert_eq!(parse_generator(&generator_to_text(&n), "n").unwrap(), n);
    }

    #[test]
    fn discriminator_round_trip() {
        let mut d = DiscriminatorSpec::vgg_a(3, 10);
        d.dropout = 0.5;
        let text = discriminator_to_text(&d);
        assert!(text.contains("conv 64 3 1 1\nmaxpool 2\n"));
        assert_eq!(parse_discriminator(&text, "d").unwrap(), d);
    }

    #[test]
    fn rejects_bad_input() {
        let d = discriminator_to_text(&DiscriminatorSpec::vgg(3, &[&[8]], 2));
        assert!(parse_discriminator(&d.replace("ccgan-modelspec 1", "ccgan-modelspec 9"), "d")
            .unwrap_err()
            .to_string()
            .contains("version"));
        assert!(parse_generator(&d, "d").is_err());
        let e = parse_discriminator(&d.replace("conv 8 3 1 1", "conv 8 3 1"), "d").unwrap_err().to_string();
        assert!(e.contains("line 7"), "{e}");
        let g = generator_to_text(&GeneratorSpec::context(3, 32, &[8, 16]));
        assert!(parse_generator(&g.replace("resolution 32", "resolution 30"), "g").is_err());
    }
}
