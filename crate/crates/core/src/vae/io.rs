//! Versioned text persistence for trained networks.
//!
//! ```text
//! latentmda-vae 1
//! grid <ni> <nj> <dx> <dy> <thickness>
//! arch <cells> <latent_dim> <activation> <reconstruction>
//! encoder <w1> <w2> ...
//! decoder <w1> <w2> ...
//! layer <rows> <cols>
//! <row-major weights>
//! <bias>
//! ...
//! ```

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};

use super::{Activation, Layer, ReconstructionLoss, VaeArchitecture, VaeModel, VaeParameters};
use crate::error::{Error, Result};
use crate::facies::Grid2D;

const MAGIC: &str = "latentmda-vae";
const VERSION: u32 = 1;

fn join(out: &mut String, vals: impl Iterator<Item = f64>) {
    let mut first = true;
    for v in vals {
        if !first {
            out.push(' ');
        }
        first = false;
        let _ = write!(out, "{v}");
    }
    out.push('\n');
}

impl VaeModel {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let g = &self.grid;
        let a = &self.arch;
        let _ = writeln!(out, "{MAGIC} {VERSION}");
        let _ = writeln!(out, "grid {} {} {} {} {}", g.ni, g.nj, g.dx, g.dy, g.thickness);
        let _ = writeln!(
            out,
            "arch {} {} {} {}",
            a.cells,
            a.latent_dim,
            a.activation.as_str(),
            a.reconstruction.as_str()
        );
        let widths = |v: &[usize]| v.iter().map(|w| format!(" {w}")).collect::<String>();
        let _ = writeln!(out, "encoder{}", widths(&a.encoder_hidden));
        let _ = writeln!(out, "decoder{}", widths(&a.decoder_hidden));
        for l in self.params.layers() {
            let _ = writeln!(out, "layer {} {}", l.w.nrows(), l.w.ncols());
            join(&mut out, l.w.transpose().iter().copied());
            join(&mut out, l.b.iter().copied());
        }
        out
    }

    pub fn from_text(text: &str) -> Result<VaeModel> {
        let mut lines = text.lines().enumerate();
        let mut next = move || -> Result<(usize, Vec<&str>)> {
            lines
                .next()
                .map(|(n, l)| (n + 1, l.split_whitespace().collect()))
                .ok_or(Error::Parse {
                    line: 0,
                    msg: "unexpected end of VAE file".into(),
                })
        };
        let perr = |line: usize, msg: String| Error::Parse { line, msg };
        fn num<T: std::str::FromStr>(line: usize, t: &str) -> Result<T> {
            t.parse().map_err(|_| Error::Parse {
                line,
                msg: format!("bad token {t:?}"),
            })
        }

        let (ln, head) = next()?;
        if head.len() != 2 || head[0] != MAGIC {
            return Err(perr(ln, "not a latentmda VAE file".into()));
        }
        let version: u32 = num(ln, head[1])?;
        if version != VERSION {
            return Err(perr(ln, format!("unsupported VAE format version {version}")));
        }

        let (ln, g) = next()?;
        if g.len() != 6 || g[0] != "grid" {
            return Err(perr(ln, "expected grid line".into()));
        }
        let grid = Grid2D::new(num(ln, g[1])?, num(ln, g[2])?, num(ln, g[3])?, num(ln, g[4])?, num(ln, g[5])?)?;

        let (ln, a) = next()?;
        if a.len() != 5 || a[0] != "arch" {
            return Err(perr(ln, "expected arch line".into()));
        }
        let activation = match a[3] {
            "relu" => Activation::Relu,
            "tanh" => Activation::Tanh,
            other => return Err(perr(ln, format!("unknown activation {other:?}"))),
        };
        let reconstruction = match a[4] {
            "cross_entropy" => ReconstructionLoss::CrossEntropy,
            "mean_squared_error" => ReconstructionLoss::MeanSquaredError,
            other => return Err(perr(ln, format!("unknown reconstruction loss {other:?}"))),
        };
        let (le, enc) = next()?;
        let (ld, dec) = next()?;
        if enc.first() != Some(&"encoder") || dec.first() != Some(&"decoder") {
            return Err(perr(le.max(ld), "expected encoder/decoder width lines".into()));
        }
        let arch = VaeArchitecture {
            cells: num(ln, a[1])?,
            latent_dim: num(ln, a[2])?,
            encoder_hidden: enc[1..].iter().map(|t| num(le, t)).collect::<Result<_>>()?,
            decoder_hidden: dec[1..].iter().map(|t| num(ld, t)).collect::<Result<_>>()?,
            activation,
            reconstruction,
        };
        arch.validate()?;

        let n_layers = arch.encoder_hidden.len() + 2 + arch.decoder_hidden.len() + 1;
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let (ln, h) = next()?;
            if h.len() != 3 || h[0] != "layer" {
                return Err(perr(ln, "expected layer header".into()));
            }
            let (rows, cols): (usize, usize) = (num(ln, h[1])?, num(ln, h[2])?);
            let (lw, w) = next()?;
            if w.len() != rows * cols {
                return Err(perr(lw, format!("expected {} weights, got {}", rows * cols, w.len())));
            }
            let w: Vec<f64> = w.iter().map(|t| num(lw, t)).collect::<Result<_>>()?;
            let (lb, b) = next()?;
            if b.len() != rows {
                return Err(perr(lb, format!("expected {rows} biases, got {}", b.len())));
            }
            let b: Vec<f64> = b.iter().map(|t| num(lb, t)).collect::<Result<_>>()?;
            layers.push(Layer {
                w: DMatrix::from_row_slice(rows, cols, &w),
                b: DVector::from_vec(b),
            });
        }
        let mut it = layers.into_iter();
        let encoder = it.by_ref().take(arch.encoder_hidden.len()).collect();
        let mu = it.next().unwrap();
        let logvar = it.next().unwrap();
        let decoder = it.collect();
        VaeModel::new(
            grid,
            arch,
            VaeParameters {
                encoder,
                mu,
                logvar,
                decoder,
            },
        )
    }
}
