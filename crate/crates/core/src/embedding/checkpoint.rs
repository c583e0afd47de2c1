//! Text checkpoint for a trained head.
//!
//! ```text
//! sfsl-head 1
//! input_dim=64
//! hidden_dim=64
//! output_dim=64
//! activation=relu
//! config.margin=0.4
//! [w1] 64 64
//! <row of 64 values>
//! ...
//! [b1] 64
//! <64 values>
//! ...
//! ```
//!
//! Values are written with 17 significant digits so loading reproduces the
//! parameters bit for bit.

use ndarray::{Array1, Array2};

use super::{EmbeddingError, EmbeddingHead};

const MAGIC: &str = "sfsl-head 1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: EmbeddingHead,
    /// Echoed configuration, written as `config.<key>=<value>`.
    pub config: Vec<(String, String)>,
}

fn err(line: usize, message: impl Into<String>) -> EmbeddingError {
    EmbeddingError::Checkpoint {
        line,
        message: message.into(),
    }
}

fn write_row(out: &mut String, values: impl Iterator<Item = f64>) {
    let row: Vec<String> = values.map(|v| format!("{v:.16e}")).collect();
    out.push_str(&row.join(" "));
    out.push('\n');
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let h = &self.head;
        let mut out = format!(
            "{MAGIC}\ninput_dim={}\nhidden_dim={}\noutput_dim={}\nactivation=relu\n",
            h.input_dim(),
            h.hidden_dim(),
            h.output_dim()
        );
        for (k, v) in &self.config {
            out.push_str(&format!("config.{k}={v}\n"));
        }
        for (name, m) in [("w1", &h.w1), ("w2", &h.w2)] {
            out.push_str(&format!("[{name}] {} {}\n", m.nrows(), m.ncols()));
            for row in m.rows() {
                write_row(&mut out, row.iter().copied());
            }
            let (bname, b) = if name == "w1" { ("b1", &h.b1) } else { ("b2", &h.b2) };
            out.push_str(&format!("[{bname}] {}\n", b.len()));
            write_row(&mut out, b.iter().copied());
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, EmbeddingError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim_end()));
        match lines.next() {
            Some((_, MAGIC)) => {}
            _ => return Err(err(1, format!("expected `{MAGIC}`"))),
        }

        let mut dims = [None::<usize>; 3];
        let mut config = Vec::new();
        let mut pending = None;
        for (n, line) in lines.by_ref() {
            if line.starts_with('[') {
                pending = Some((n, line));
                break;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(n, "expected key=value"))?;
            let parse_dim = |v: &str| v.parse::<usize>().map_err(|e| err(n, e.to_string()));
            match k {
                "input_dim" => dims[0] = Some(parse_dim(v)?),
                "hidden_dim" => dims[1] = Some(parse_dim(v)?),
                "output_dim" => dims[2] = Some(parse_dim(v)?),
                "activation" if v == "relu" => {}
                "activation" => return Err(err(n, format!("unsupported activation `{v}`"))),
                _ => match k.strip_prefix("config.") {
                    Some(key) => config.push((key.to_owned(), v.to_owned())),
                    None => return Err(err(n, format!("unknown key `{k}`"))),
                },
            }
        }
        let [Some(input), Some(hidden), Some(output)] = dims else {
            return Err(err(0, "missing layer dimensions"));
        };

        let mut reader = BlockReader { pending, lines };
        let w1 = reader.block("w1", hidden, input)?;
        let b1 = reader.block("b1", hidden, 1)?;
        let w2 = reader.block("w2", output, hidden)?;
        let b2 = reader.block("b2", output, 1)?;
        let head = EmbeddingHead::from_parts(
            Array2::from_shape_vec((hidden, input), w1).expect("shape checked"),
            Array1::from(b1),
            Array2::from_shape_vec((output, hidden), w2).expect("shape checked"),
            Array1::from(b2),
        )?;
        Ok(Checkpoint { head, config })
    }
}

struct BlockReader<'a, I> {
    pending: Option<(usize, &'a str)>,
    lines: I,
}

impl<'a, I: Iterator<Item = (usize, &'a str)>> BlockReader<'a, I> {
    fn next_line(&mut self, expect: &str) -> Result<(usize, &'a str), EmbeddingError> {
        self.pending
            .take()
            .or_else(|| self.lines.next())
            .ok_or_else(|| err(0, format!("unexpected end of file, expected {expect}")))
    }

    /// Reads `[name] rows cols` followed by `rows` lines, or `[name] rows`
    /// followed by one line when `cols` is 1.
    fn block(&mut self, name: &str, rows: usize, cols: usize) -> Result<Vec<f64>, EmbeddingError> {
        let matrix = name.starts_with('w');
        let (n, header) = self.next_line(name)?;
        let mut parts = header.split_whitespace();
        if parts.next() != Some(format!("[{name}]").as_str()) {
            return Err(err(n, format!("expected [{name}]")));
        }
        let shape: Vec<usize> = parts
            .map(|p| p.parse().map_err(|_| err(n, "bad shape")))
            .collect::<Result<_, _>>()?;
        let want = if matrix { vec![rows, cols] } else { vec![rows] };
        if shape != want {
            return Err(err(n, format!("[{name}] has shape {shape:?}, expected {want:?}")));
        }
        let (row_count, row_len) = if matrix { (rows, cols) } else { (1, rows) };
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..row_count {
            let (n, line) = self.next_line("values")?;
            let row: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>().map_err(|e| err(n, e.to_string())))
                .collect::<Result<_, _>>()?;
            if row.len() != row_len {
                return Err(err(n, format!("expected {row_len} values, got {}", row.len())));
            }
            values.extend(row);
        }
        Ok(values)
    }
}
