//! External embedding model run as a child process.
//!
//! The child receives the window side in the `JVA_WINDOW` environment
//! variable and reads, until end of input, records of
//! `timestamp_ns: u64 | window*window*3 RGB8 bytes`. For every record it
//! writes `timestamp_ns: u64 | dim: u32 | dim x f32` to standard output.
//! All integers and floats little-endian. Output order is free; records are
//! matched by timestamp.

use std::collections::HashMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::process::{Command, Stdio};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{embed_builtin, EmbedError, EmbeddingBackend, FeatureVector};
use crate::gaze::{Nanos, Participant};
use crate::tube::TubeSlice;

pub const WINDOW_ENV: &str = "JVA_WINDOW";

#[derive(Debug, Clone)]
pub struct ExternalBackend {
    pub program: String,
    pub args: Vec<String>,
}

impl ExternalBackend {
    pub fn new(command: &[String]) -> Result<Self, EmbedError> {
        let (program, args) = command.split_first().ok_or_else(|| EmbedError::External("empty command".to_string()))?;
        Ok(Self { program: program.clone(), args: args.to_vec() })
    }

    fn run(&self, slices: &[&TubeSlice]) -> Result<HashMap<Nanos, Vec<f64>>, EmbedError> {
        let ext = |msg: String| EmbedError::External(format!("{}: {msg}", self.program));
        let Some(window) = slices.first().map(|s| s.window) else {
            return Ok(HashMap::new());
        };
        if slices.iter().any(|s| s.window != window) {
            return Err(ext("slices of different window sizes in one batch".to_string()));
        }
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .env(WINDOW_ENV, window.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| ext(format!("spawn failed: {e}")))?;

        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");

        let (records, write_result) = std::thread::scope(|scope| {
            let writer = scope.spawn(move || -> std::io::Result<()> {
                let mut w = BufWriter::new(stdin);
                for s in slices {
                    w.write_u64::<LittleEndian>(s.timestamp)?;
                    w.write_all(&s.pixels)?;
                }
                w.flush()
            });
            let records = read_records(BufReader::new(stdout));
            (records, writer.join().expect("writer thread panicked"))
        });

        let status = child.wait().map_err(|e| ext(e.to_string()))?;
        if !status.success() {
            return Err(ext(format!("exited with {status}")));
        }
        write_result.map_err(|e| ext(format!("writing frames: {e}")))?;
        records.map_err(|e| ext(format!("reading vectors: {e}")))
    }
}

fn read_records<R: Read>(mut input: R) -> std::io::Result<HashMap<Nanos, Vec<f64>>> {
    let mut out = HashMap::new();
    loop {
        let ts = match input.read_u64::<LittleEndian>() {
            Ok(ts) => ts,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(out),
            Err(e) => return Err(e),
        };
        let dim = input.read_u32::<LittleEndian>()? as usize;
        let mut v = vec![0f32; dim];
        input.read_f32_into::<LittleEndian>(&mut v)?;
        out.insert(ts, v.into_iter().map(f64::from).collect());
    }
}

impl EmbeddingBackend for ExternalBackend {
    fn id(&self) -> String {
        let name = std::path::Path::new(&self.program)
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| self.program.clone());
        format!("external-{name}")
    }

    fn embed_batch(&self, _: Participant, slices: &[&TubeSlice]) -> Vec<Result<FeatureVector, EmbedError>> {
        match self.run(slices) {
            Ok(mut vectors) => {
                let id = self.id();
                slices
                    .iter()
                    .map(|s| match vectors.remove(&s.timestamp) {
                        Some(v) => FeatureVector::normalized(v, id.clone()),
                        None => Err(EmbedError::MissingEmbedding(s.timestamp)),
                    })
                    .collect()
            }
            Err(e) => slices.iter().map(|_| Err(e.clone())).collect(),
        }
    }
}

/// Child side of the protocol using the built-in descriptor. Serves as the
/// reference implementation for model wrappers.
pub fn serve_builtin<R: Read, W: Write>(input: R, output: W, window: u32) -> std::io::Result<usize> {
    let mut input = BufReader::new(input);
    let mut output = BufWriter::new(output);
    let frame_len = window as usize * window as usize * 3;
    let mut served = 0;
    loop {
        let ts = match input.read_u64::<LittleEndian>() {
            Ok(ts) => ts,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e),
        };
        let mut pixels = vec![0u8; frame_len];
        input.read_exact(&mut pixels)?;
        let v = embed_builtin(&TubeSlice::from_pixels(ts, window, pixels))
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e.to_string()))?;
        output.write_u64::<LittleEndian>(ts)?;
        output.write_u32::<LittleEndian>(v.dim() as u32)?;
        for &x in v.values() {
            output.write_f32::<LittleEndian>(x as f32)?;
        }
        served += 1;
    }
    output.flush()?;
    Ok(served)
}
