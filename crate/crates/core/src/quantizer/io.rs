//! Line-oriented TSV model files.
//!
//! ```text
//! kind       <rqvae|rqkmeans|multivq|random>
//! structure  <n_1,...,n_m>  <code_dim>
//! seed       <u64>                          (random only)
//! mlp        <encoder|decoder>  <d_0,...,d_L>
//! layer      <weights csv>  <bias csv>      (one per layer)
//! codebook   <level>
//! <codeword csv>                            (n_level rows)
//! vq         <level>                        (multivq: opens one level model)
//! ```

use std::io::Write;
use std::path::Path;

use super::codebook::CodebookStack;
use super::mlp::Mlp;
use super::multivq::MultiVq;
use super::random::RandomQuantizer;
use super::rqvae::RqVae;
use super::{QuantizerKind, QuantizerModel};
use crate::catalog::{format_floats, read_text, SidStructure};
use crate::error::{Error, Result};

fn write_structure<W: Write>(out: &mut W, s: &SidStructure) -> std::io::Result<()> {
    writeln!(out, "structure\t{s}\t{}", s.code_dim())
}

fn write_mlp<W: Write>(out: &mut W, name: &str, mlp: &Mlp) -> std::io::Result<()> {
    let dims: Vec<String> = mlp.dims().iter().map(|d| d.to_string()).collect();
    writeln!(out, "mlp\t{name}\t{}", dims.join(","))?;
    for l in 0..mlp.num_layers() {
        let (w, b) = mlp.layer(l);
        writeln!(out, "layer\t{}\t{}", format_floats(w), format_floats(b))?;
    }
    Ok(())
}

fn write_codebooks<W: Write>(out: &mut W, cb: &CodebookStack) -> std::io::Result<()> {
    for j in 0..cb.levels() {
        writeln!(out, "codebook\t{j}")?;
        for row in cb.level(j).chunks_exact(cb.dim()) {
            writeln!(out, "{}", format_floats(row))?;
        }
    }
    Ok(())
}

fn write_rqvae<W: Write>(out: &mut W, m: &RqVae) -> std::io::Result<()> {
    write_structure(out, m.structure())?;
    write_mlp(out, "encoder", m.encoder())?;
    write_mlp(out, "decoder", m.decoder())?;
    write_codebooks(out, m.codebooks())
}

pub fn write_model<W: Write>(model: &QuantizerModel, mut out: W) -> std::io::Result<()> {
    writeln!(out, "kind\t{}", model.kind())?;
    match model {
        QuantizerModel::RqVae(m) => write_rqvae(&mut out, m),
        QuantizerModel::RqKmeans(cb) => {
            write_structure(&mut out, cb.structure())?;
            write_codebooks(&mut out, cb)
        }
        QuantizerModel::MultiVq(m) => {
            write_structure(&mut out, m.structure())?;
            for (j, vq) in m.level_models().iter().enumerate() {
                writeln!(out, "vq\t{j}")?;
                write_rqvae(&mut out, vq)?;
            }
            Ok(())
        }
        QuantizerModel::Random(r) => {
            write_structure(&mut out, r.structure())?;
            writeln!(out, "seed\t{}", r.seed())
        }
    }
}

struct Lines<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
}

impl<'a> Lines<'a> {
    fn next_fields(&mut self) -> Result<(usize, Vec<&'a str>)> {
        loop {
            match self.lines.next() {
                Some((_, l)) if l.trim().is_empty() => continue,
                Some((i, l)) => return Ok((i + 1, l.split('\t').collect())),
                None => return Err(Error::parse(0, "unexpected end of model file")),
            }
        }
    }

    fn expect(&mut self, keyword: &str, arity: usize) -> Result<(usize, Vec<&'a str>)> {
        let (line, fields) = self.next_fields()?;
        if fields[0] != keyword || fields.len() != arity + 1 {
            return Err(Error::parse(
                line,
                format!("expected `{keyword}` with {arity} field(s), found `{}`", fields.join("\t")),
            ));
        }
        Ok((line, fields[1..].to_vec()))
    }

    fn at_end(&mut self) -> bool {
        while let Some((_, l)) = self.lines.peek() {
            if l.trim().is_empty() {
                self.lines.next();
            } else {
                return false;
            }
        }
        true
    }
}

fn floats(line: usize, s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|v| v.parse::<f64>().map_err(|_| Error::parse(line, format!("bad number `{v}`"))))
        .collect()
}

fn read_structure(lines: &mut Lines<'_>) -> Result<SidStructure> {
    let (line, f) = lines.expect("structure", 2)?;
    let dim = f[1]
        .parse::<usize>()
        .map_err(|_| Error::parse(line, format!("bad code dimension `{}`", f[1])))?;
    SidStructure::parse_levels(f[0], dim)
}

fn read_mlp(lines: &mut Lines<'_>, name: &str) -> Result<Mlp> {
    let (line, f) = lines.expect("mlp", 2)?;
    if f[0] != name {
        return Err(Error::parse(line, format!("expected `{name}` network, found `{}`", f[0])));
    }
    let dims = f[1]
        .split(',')
        .map(|d| d.parse::<usize>().map_err(|_| Error::parse(line, format!("bad layer dim `{d}`"))))
        .collect::<Result<Vec<_>>>()?;
    let mut params = Vec::new();
    for _ in 1..dims.len() {
        let (line, f) = lines.expect("layer", 2)?;
        params.extend(floats(line, f[0])?);
        params.extend(floats(line, f[1])?);
    }
    Mlp::from_params(&dims, params).map_err(|e| Error::parse(line, e.to_string()))
}

fn read_codebooks(lines: &mut Lines<'_>, structure: &SidStructure) -> Result<CodebookStack> {
    let mut levels = Vec::with_capacity(structure.levels());
    for j in 0..structure.levels() {
        let (line, f) = lines.expect("codebook", 1)?;
        if f[0] != j.to_string() {
            return Err(Error::parse(line, format!("expected codebook {j}, found {}", f[0])));
        }
        let mut table = Vec::with_capacity(structure.level_size(j) * structure.code_dim());
        for _ in 0..structure.level_size(j) {
            let (line, f) = lines.next_fields()?;
            let row = floats(line, f[0])?;
            if f.len() != 1 || row.len() != structure.code_dim() {
                return Err(Error::parse(line, format!("codeword must have {} values", structure.code_dim())));
            }
            table.extend(row);
        }
        levels.push(table);
    }
    CodebookStack::new(structure.clone(), levels)
}

fn read_rqvae(lines: &mut Lines<'_>) -> Result<RqVae> {
    let structure = read_structure(lines)?;
    let encoder = read_mlp(lines, "encoder")?;
    let decoder = read_mlp(lines, "decoder")?;
    let codebooks = read_codebooks(lines, &structure)?;
    RqVae::from_parts(encoder, decoder, codebooks)
}

pub fn parse_model(text: &str) -> Result<QuantizerModel> {
    let mut lines = Lines {
        lines: text.lines().enumerate().peekable(),
    };
    let (line, f) = lines.expect("kind", 1)?;
    let kind: QuantizerKind = f[0].parse().map_err(|e: Error| Error::parse(line, e.to_string()))?;
    let model = match kind {
        QuantizerKind::RqVae => QuantizerModel::RqVae(read_rqvae(&mut lines)?),
        QuantizerKind::RqKmeans => {
            let structure = read_structure(&mut lines)?;
            QuantizerModel::RqKmeans(read_codebooks(&mut lines, &structure)?)
        }
        QuantizerKind::MultiVq => {
            let structure = read_structure(&mut lines)?;
            let mut levels = Vec::with_capacity(structure.levels());
            for j in 0..structure.levels() {
                let (line, f) = lines.expect("vq", 1)?;
                if f[0] != j.to_string() {
                    return Err(Error::parse(line, format!("expected vq {j}, found {}", f[0])));
                }
                levels.push(read_rqvae(&mut lines)?);
            }
            QuantizerModel::MultiVq(MultiVq::from_levels(structure, levels)?)
        }
        QuantizerKind::Random => {
            let structure = read_structure(&mut lines)?;
            let (line, f) = lines.expect("seed", 1)?;
            let seed = f[0]
                .parse::<u64>()
                .map_err(|_| Error::parse(line, format!("bad seed `{}`", f[0])))?;
            QuantizerModel::Random(RandomQuantizer::new(structure, seed))
        }
    };
    if !lines.at_end() {
        let (line, _) = lines.next_fields()?;
        return Err(Error::parse(line, "trailing content after model"));
    }
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<QuantizerModel> {
    parse_model(&read_text(path.as_ref())?)
}
