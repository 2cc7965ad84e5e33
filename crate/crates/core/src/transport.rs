//! Simulated noiseless channel between the parameter server and its workers.
//!
//! Downlink frames carry the full-precision iterate:
//!
//! ```text
//! | iteration: u32 LE | x[0]: f64 LE | ... | x[n-1]: f64 LE |
//! ```
//!
//! Uplink frames carry a worker's message:
//!
//! ```text
//! | iteration: u32 LE | worker: u16 LE | kind: u8 | bit_len: u32 LE | body |
//! ```
//!
//! `kind` 0 is a quantized payload whose body is the `n R` index bits packed
//! MSB first and padded to a whole byte. `kind` 1 is the lossless surrogate used
//! to emulate an infinite rate: the body is `n` little-endian `f64` values and
//! `bit_len = 64 n`.
//!
//! Dynamic ranges are never transmitted; both ends derive them from public
//! constants.

use std::collections::VecDeque;

use thiserror::Error;

use crate::quantizer::{BitString, Payload, QuantizerError};
use crate::scalar::Scalar;

const DOWNLINK_HEADER: usize = 4;
const UPLINK_HEADER: usize = 4 + 2 + 1 + 4;
const KIND_QUANTIZED: u8 = 0;
const KIND_EXACT: u8 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("framing error: {0}")]
    Framing(String),
    #[error("no frame waiting for {0}")]
    Empty(&'static str),
    #[error("unknown worker {worker} (channel has {workers})")]
    UnknownWorker { worker: usize, workers: usize },
    #[error("payload: {0}")]
    Payload(#[from] QuantizerError),
}

fn framing(msg: impl Into<String>) -> TransportError {
    TransportError::Framing(msg.into())
}

pub fn encode_iterate<T: Scalar>(iteration: u64, x: &[T]) -> Result<Vec<u8>, TransportError> {
    if x.is_empty() {
        return Err(framing("iterate frame needs at least one coordinate"));
    }
    let t = u32::try_from(iteration).map_err(|_| framing("iteration index exceeds 32 bits"))?;
    let mut out = Vec::with_capacity(DOWNLINK_HEADER + 8 * x.len());
    out.extend_from_slice(&t.to_le_bytes());
    for v in x {
        out.extend_from_slice(&v.to_wire().to_le_bytes());
    }
    Ok(out)
}

pub fn decode_iterate<T: Scalar>(frame: &[u8]) -> Result<(u64, Vec<T>), TransportError> {
    if frame.len() < DOWNLINK_HEADER + 8 || !(frame.len() - DOWNLINK_HEADER).is_multiple_of(8) {
        return Err(framing(format!("iterate frame of {} bytes", frame.len())));
    }
    let t = u32::from_le_bytes(frame[..4].try_into().unwrap());
    let x = frame[DOWNLINK_HEADER..]
        .chunks_exact(8)
        .map(|c| T::from_wire(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    Ok((u64::from(t), x))
}

/// What a worker pushes to the server in one iteration.
#[derive(Debug, Clone, PartialEq)]
pub enum UplinkMessage {
    Quantized(Payload),
    /// Infinite-rate surrogate: the quantizer input sent verbatim.
    Exact {
        iteration: u64,
        values: Vec<f64>,
    },
}

impl UplinkMessage {
    pub fn iteration(&self) -> u64 {
        match self {
            UplinkMessage::Quantized(p) => p.iteration,
            UplinkMessage::Exact { iteration, .. } => *iteration,
        }
    }
}

pub fn encode_uplink(worker: usize, msg: &UplinkMessage) -> Result<Vec<u8>, TransportError> {
    let t = u32::try_from(msg.iteration()).map_err(|_| framing("iteration index exceeds 32 bits"))?;
    let w = u16::try_from(worker).map_err(|_| framing("worker id exceeds 16 bits"))?;
    let (kind, bit_len, body) = match msg {
        UplinkMessage::Quantized(p) => {
            let bits = p.encode()?;
            (KIND_QUANTIZED, bits.len(), bits.as_bytes().to_vec())
        }
        UplinkMessage::Exact { values, .. } => {
            let body: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
            (KIND_EXACT, 64 * values.len(), body)
        }
    };
    let bit_len = u32::try_from(bit_len).map_err(|_| framing("payload exceeds 2^32 bits"))?;
    let mut out = Vec::with_capacity(UPLINK_HEADER + body.len());
    out.extend_from_slice(&t.to_le_bytes());
    out.extend_from_slice(&w.to_le_bytes());
    out.push(kind);
    out.extend_from_slice(&bit_len.to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Header fields of an uplink frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UplinkHeader {
    pub iteration: u64,
    pub worker: usize,
    pub exact: bool,
    pub bit_len: usize,
}

pub fn uplink_header(frame: &[u8]) -> Result<UplinkHeader, TransportError> {
    if frame.len() < UPLINK_HEADER {
        return Err(framing(format!("truncated uplink frame of {} bytes", frame.len())));
    }
    let iteration = u64::from(u32::from_le_bytes(frame[0..4].try_into().unwrap()));
    let worker = usize::from(u16::from_le_bytes(frame[4..6].try_into().unwrap()));
    let exact = match frame[6] {
        KIND_QUANTIZED => false,
        KIND_EXACT => true,
        k => return Err(framing(format!("unknown uplink kind {k}"))),
    };
    let bit_len = u32::from_le_bytes(frame[7..11].try_into().unwrap()) as usize;
    if frame.len() - UPLINK_HEADER != bit_len.div_ceil(8) {
        return Err(framing(format!(
            "uplink body of {} bytes does not hold {bit_len} bits",
            frame.len() - UPLINK_HEADER
        )));
    }
    Ok(UplinkHeader {
        iteration,
        worker,
        exact,
        bit_len,
    })
}

/// Decodes an uplink frame, checking it carries exactly `dim * rate` bits
/// (or `64 * dim` for the lossless surrogate).
pub fn decode_uplink(frame: &[u8], dim: usize, rate: u32) -> Result<UplinkMessage, TransportError> {
    let h = uplink_header(frame)?;
    let body = &frame[UPLINK_HEADER..];
    if h.exact {
        if h.bit_len != 64 * dim {
            return Err(framing(format!(
                "exact payload of {} bits, expected {}",
                h.bit_len,
                64 * dim
            )));
        }
        let values = body
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        return Ok(UplinkMessage::Exact {
            iteration: h.iteration,
            values,
        });
    }
    let expected = dim * rate as usize;
    if h.bit_len != expected {
        return Err(framing(format!(
            "payload of {} bits, expected n*R = {expected}",
            h.bit_len
        )));
    }
    let bits = BitString::from_packed(body.to_vec(), h.bit_len)?;
    Ok(UplinkMessage::Quantized(Payload::decode(
        h.iteration,
        &bits,
        dim,
        rate,
    )?))
}

/// Traffic of one iteration.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IterationTraffic {
    pub iteration: u64,
    pub downlink_bytes: usize,
    pub uplink_bits: usize,
    pub per_worker_bits: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ChannelTrace {
    pub records: Vec<IterationTraffic>,
}

/// Totals over a finished run.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TraceSummary {
    pub iterations: usize,
    pub downlink_bytes: usize,
    pub uplink_bits: usize,
    pub per_worker_bits: Vec<usize>,
}

impl ChannelTrace {
    pub fn summary(&self) -> TraceSummary {
        let workers = self.records.iter().map(|r| r.per_worker_bits.len()).max().unwrap_or(0);
        let mut per_worker_bits = vec![0; workers];
        for r in &self.records {
            for (acc, b) in per_worker_bits.iter_mut().zip(&r.per_worker_bits) {
                *acc += b;
            }
        }
        TraceSummary {
            iterations: self.records.len(),
            downlink_bytes: self.records.iter().map(|r| r.downlink_bytes).sum(),
            uplink_bits: self.records.iter().map(|r| r.uplink_bits).sum(),
            per_worker_bits,
        }
    }

    /// Per-iteration uplink series, for CSV output.
    pub fn uplink_series(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.uplink_bits).collect()
    }
}

/// In-memory duplex link: one downlink queue per worker and one uplink queue
/// per worker. The protocol is strictly alternating.
#[derive(Debug, Clone)]
pub struct Channel {
    downlink: Vec<VecDeque<Vec<u8>>>,
    uplink: Vec<VecDeque<Vec<u8>>>,
    trace: ChannelTrace,
}

impl Channel {
    pub fn new(workers: usize) -> Self {
        Self {
            downlink: vec![VecDeque::new(); workers],
            uplink: vec![VecDeque::new(); workers],
            trace: ChannelTrace::default(),
        }
    }

    pub fn workers(&self) -> usize {
        self.downlink.len()
    }

    fn check(&self, worker: usize) -> Result<(), TransportError> {
        if worker >= self.workers() {
            return Err(TransportError::UnknownWorker {
                worker,
                workers: self.workers(),
            });
        }
        Ok(())
    }

    /// Server side: broadcast the current iterate to every worker.
    pub fn send_iterate<T: Scalar>(&mut self, iteration: u64, x: &[T]) -> Result<(), TransportError> {
        let frame = encode_iterate(iteration, x)?;
        self.trace.records.push(IterationTraffic {
            iteration,
            downlink_bytes: frame.len() * self.workers(),
            uplink_bits: 0,
            per_worker_bits: vec![0; self.workers()],
        });
        for q in &mut self.downlink {
            q.push_back(frame.clone());
        }
        Ok(())
    }

    /// Worker side: take the iterate addressed to `worker`.
    pub fn recv_iterate<T: Scalar>(&mut self, worker: usize) -> Result<(u64, Vec<T>), TransportError> {
        self.check(worker)?;
        let frame = self.downlink[worker]
            .pop_front()
            .ok_or(TransportError::Empty("downlink"))?;
        decode_iterate(&frame)
    }

    /// Worker side: push a message to the server.
    pub fn send_payload(&mut self, worker: usize, msg: &UplinkMessage) -> Result<(), TransportError> {
        self.check(worker)?;
        let frame = encode_uplink(worker, msg)?;
        let bits = uplink_header(&frame)?.bit_len;
        if let Some(rec) = self.trace.records.last_mut() {
            rec.uplink_bits += bits;
            rec.per_worker_bits[worker] += bits;
        }
        self.uplink[worker].push_back(frame);
        Ok(())
    }

    /// Server side: take the next message from `worker`, validating its size
    /// against the public `(dim, rate)`.
    pub fn recv_payload(&mut self, worker: usize, dim: usize, rate: u32) -> Result<UplinkMessage, TransportError> {
        self.check(worker)?;
        let frame = self.uplink[worker].pop_front().ok_or(TransportError::Empty("uplink"))?;
        let msg = decode_uplink(&frame, dim, rate)?;
        Ok(msg)
    }

    pub fn trace(&self) -> &ChannelTrace {
        &self.trace
    }

    pub fn into_trace(self) -> ChannelTrace {
        self.trace
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn iterate_frame_vector() {
        let frame = encode_iterate(3, &[1.0f64, -1.0]).unwrap();
        assert_eq!(frame.len(), 4 + 16);
        assert_eq!(&frame[..4], &[3, 0, 0, 0]);
        assert_eq!(&frame[4..12], &1.0f64.to_le_bytes());
        let (t, x): (u64, Vec<f64>) = decode_iterate(&frame).unwrap();
        assert_eq!((t, x), (3, vec![1.0, -1.0]));
    }

    #[test]
    fn degenerate_and_truncated_frames() {
        assert!(matches!(encode_iterate::<f64>(0, &[]), Err(TransportError::Framing(_))));
        let frame = encode_iterate(0, &[2.0f64, 3.0]).unwrap();
        assert!(decode_iterate::<f64>(&frame[..frame.len() - 1]).is_err());
        assert!(decode_iterate::<f64>(&frame[..4]).is_err());
        let up = encode_uplink(
            0,
            &UplinkMessage::Quantized(Payload {
                iteration: 0,
                rate: 2,
                indices: vec![1, 2, 3, 0],
            }),
        )
        .unwrap();
        assert!(decode_uplink(&up[..up.len() - 1], 4, 2).is_err());
        assert!(decode_uplink(&up[..5], 4, 2).is_err());
    }

    #[test]
    fn payload_length_is_checked_against_public_rate() {
        let msg = UplinkMessage::Quantized(Payload {
            iteration: 1,
            rate: 2,
            indices: vec![1, 2, 3, 0],
        });
        let frame = encode_uplink(0, &msg).unwrap();
        assert_eq!(decode_uplink(&frame, 4, 2).unwrap(), msg);
        assert!(matches!(decode_uplink(&frame, 4, 3), Err(TransportError::Framing(_))));
        assert!(matches!(decode_uplink(&frame, 3, 2), Err(TransportError::Framing(_))));
    }

    #[test]
    fn trace_counts_payload_bits() {
        let mut ch = Channel::new(1);
        ch.send_iterate(0, &[0.0f64; 4]).unwrap();
        let (_, x): (u64, Vec<f64>) = ch.recv_iterate(0).unwrap();
        assert_eq!(x.len(), 4);
        let msg = UplinkMessage::Quantized(Payload {
            iteration: 0,
            rate: 2,
            indices: vec![0, 1, 2, 3],
        });
        ch.send_payload(0, &msg).unwrap();
        assert_eq!(ch.recv_payload(0, 4, 2).unwrap(), msg);
        let s = ch.trace().summary();
        assert_eq!(s.uplink_bits, 8);
        assert_eq!(s.downlink_bytes, 4 + 32);
        assert!(ch.recv_payload(0, 4, 2).is_err());
        assert!(ch.recv_iterate::<f64>(1).is_err());
    }

    #[test]
    fn summary_identities() {
        assert_eq!(ChannelTrace::default().summary(), TraceSummary::default());
        let mut ch = Channel::new(2);
        let rates = [3u32, 1];
        for t in 0..5u64 {
            ch.send_iterate(t, &[1.0f64; 6]).unwrap();
            for (k, &r) in rates.iter().enumerate() {
                let _: (u64, Vec<f64>) = ch.recv_iterate(k).unwrap();
                let p = Payload {
                    iteration: t,
                    rate: r,
                    indices: vec![0; 6],
                };
                ch.send_payload(k, &UplinkMessage::Quantized(p)).unwrap();
                ch.recv_payload(k, 6, r).unwrap();
            }
        }
        let s = ch.trace().summary();
        assert_eq!(s.uplink_bits, ch.trace().uplink_series().iter().sum::<usize>());
        assert_eq!(s.uplink_bits, 5 * 6 * (3 + 1));
        assert_eq!(s.per_worker_bits, vec![5 * 6 * 3, 5 * 6]);
    }

    proptest! {
        #[test]
        fn iterate_round_trip(t in 0u64..u32::MAX as u64, x in prop::collection::vec(any::<f64>(), 1..50)) {
            let frame = encode_iterate(t, &x).unwrap();
            let (t2, y): (u64, Vec<f64>) = decode_iterate(&frame).unwrap();
            prop_assert_eq!(t2, t);
            prop_assert_eq!(x.len(), y.len());
            for (a, b) in x.iter().zip(&y) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
