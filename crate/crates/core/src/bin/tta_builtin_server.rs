//! Serves the built-in threshold predictor over the external-predictor
//! protocol on stdin/stdout. Used to exercise the client end to end; the
//! `--fault` modes make it misbehave in specific ways.

use std::io::{self, BufReader, BufWriter, Write};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, ValueEnum};
use ttaseg::predictor::protocol::{self, Header, ProtocolError, DTYPE, PROTOCOL_VERSION};
use ttaseg::predictor::{Predictor, ThresholdPredictor};
use ttaseg::volume::{Grid, Volume};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Fault {
    /// Send only half of the probability payload, then exit.
    Truncate,
    /// Corrupt the probabilities of voxel (1, 0, 0).
    BadProbs,
    /// Exit without answering.
    Die,
    /// Never answer.
    Hang,
    /// Announce a protocol version the client does not speak.
    BadVersion,
    /// Skip the hello frame.
    NoHello,
    /// Answer with an error frame.
    Error,
}

#[derive(Debug, Parser)]
#[command(name = "tta-builtin-server")]
struct Args {
    #[arg(long, value_delimiter = ',', default_value = "0.5", allow_hyphen_values = true)]
    thresholds: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long, default_value_t = 1)]
    channels: usize,
    #[arg(long, default_value_t = 0.0)]
    softness: f64,
    #[arg(long, value_enum)]
    fault: Option<Fault>,
    /// Number of requests answered correctly before the fault kicks in.
    #[arg(long, default_value_t = 0)]
    fault_after: usize,
}

fn send(out: &mut impl Write, header: &Header, payload: &[u8]) -> io::Result<()> {
    protocol::write_frame(out, header, payload)
}

fn error_frame(out: &mut impl Write, message: String) -> io::Result<()> {
    send(out, &Header::Error { message }, &[])
}

fn serve(args: &Args) -> io::Result<()> {
    let predictor = ThresholdPredictor::new(args.thresholds.clone(), args.channel, args.softness)
        .and_then(|p| p.with_channels(args.channels))
        .map_err(io::Error::other)?;
    let contract = predictor.contract().clone();
    let mut input = BufReader::new(io::stdin().lock());
    let mut out = BufWriter::new(io::stdout().lock());

    if args.fault != Some(Fault::NoHello) {
        let protocol = if args.fault == Some(Fault::BadVersion) { PROTOCOL_VERSION + 98 } else { PROTOCOL_VERSION };
        let hello = Header::Hello {
            protocol,
            classes: contract.classes,
            channels: contract.channels,
            name: "builtin-threshold".into(),
        };
        send(&mut out, &hello, &[])?;
    }

    let mut served = 0usize;
    loop {
        let frame = match protocol::read_frame(&mut input) {
            Ok(frame) => frame,
            Err(ProtocolError::Closed) => return Ok(()),
            Err(e) => {
                error_frame(&mut out, e.to_string())?;
                return Ok(());
            }
        };
        let (dims, channels, spacing) = match frame.header {
            Header::Predict { dims, channels, spacing, .. } => (dims, channels, spacing),
            other => {
                error_frame(&mut out, format!("expected a predict frame, got {}", other.kind()))?;
                continue;
            }
        };
        if channels != contract.channels {
            error_frame(&mut out, format!("expected {} channels, got {channels}", contract.channels))?;
            continue;
        }
        let volume = protocol::decode_f32(&frame.payload)
            .map_err(|e| e.to_string())
            .and_then(|data| {
                let grid = Grid::new(dims, spacing).map_err(|e| e.to_string())?;
                Volume::new(grid, channels, data).map_err(|e| e.to_string())
            });
        let volume = match volume {
            Ok(v) => v,
            Err(message) => {
                error_frame(&mut out, message)?;
                continue;
            }
        };

        let fault = args.fault.filter(|_| served >= args.fault_after);
        served += 1;
        let probs = match predictor.predict(&volume, served as u64) {
            Ok(p) => p,
            Err(e) => {
                error_frame(&mut out, e.to_string())?;
                continue;
            }
        };
        let mut values = probs.probs().to_vec();
        let header = Header::Probs { dims, classes: contract.classes, dtype: DTYPE.into() };
        match fault {
            Some(Fault::Die) => std::process::exit(3),
            Some(Fault::Hang) => loop {
                std::thread::sleep(Duration::from_secs(3600));
            },
            Some(Fault::Error) => {
                error_frame(&mut out, "simulated model failure".into())?;
                continue;
            }
            Some(Fault::Truncate) => {
                let payload = protocol::encode_f32(&values);
                send(&mut out, &header, &payload[..payload.len() / 2])?;
                return Ok(());
            }
            Some(Fault::BadProbs) => {
                let n = volume.grid().len();
                values[1] = 0.9;
                values[n + 1] = 0.9;
            }
            _ => {}
        }
        send(&mut out, &header, &protocol::encode_f32(&values))?;
    }
}

fn main() -> ExitCode {
    let args = Args::parse();
    match serve(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.kind() == io::ErrorKind::BrokenPipe => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tta-builtin-server: {e}");
            ExitCode::FAILURE
        }
    }
}
