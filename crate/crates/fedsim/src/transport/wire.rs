//! Binary frame layout, big-endian throughout:
//!
//! ```text
//! frame  = length:u32 | kind:u8 | round:u32 | sender:u32 | payload
//! ```
//!
//! `length` counts everything after itself (9 + payload bytes). Reals are
//! 8-byte IEEE-754; sparse entries are (index:u32, value:f64) pairs preceded
//! by an entry count.
//!
//! Payloads by kind:
//!
//! ```text
//! JOIN          version:u8 | claimed_id:u32      (0xFFFFFFFF = assign one)
//! JOIN_ACK      assigned_id:u32 | config_digest:u64
//! GLOBAL_MODEL  count:u32 | count x f64
//! CLIENT_UPDATE entries:u32 | entries x (u32,f64) | avg_loss:f64
//!               | n_samples:u32 | iterations:u32 | mean_loss_scale:f64
//!               | val_classes:u32 | val_classes x (class:u32, dice:f64)
//! ROUND_DONE    (empty)
//! SHUTDOWN      (empty)
//! ```

use crate::client::RoundReport;
use crate::error::{FedSimError, Result};
use crate::param_math::{ParamVector, SparseUpdate};

pub const PROTOCOL_VERSION: u8 = 1;
/// Sender id used by the server.
pub const SERVER_SENDER: u32 = u32::MAX;
/// Claimed id asking the server to assign one in connection order.
pub const CLAIM_ASSIGN: u32 = u32::MAX;

const HEADER_LEN: usize = 9; // kind + round + sender
const MAX_BODY: usize = i32::MAX as usize;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MessageKind {
    Join = 1,
    JoinAck = 2,
    GlobalModel = 3,
    ClientUpdate = 4,
    RoundDone = 5,
    Shutdown = 6,
}

impl MessageKind {
    pub fn from_tag(tag: u8) -> Result<Self> {
        Ok(match tag {
            1 => Self::Join,
            2 => Self::JoinAck,
            3 => Self::GlobalModel,
            4 => Self::ClientUpdate,
            5 => Self::RoundDone,
            6 => Self::Shutdown,
            _ => return Err(FedSimError::Protocol(format!("unknown message tag {tag}"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    Join { version: u8, claimed_id: u32 },
    JoinAck { assigned_id: u32, config_digest: u64 },
    GlobalModel(ParamVector),
    ClientUpdate(RoundReport),
    RoundDone,
    Shutdown,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Message {
    pub round: u32,
    pub sender: u32,
    pub payload: Payload,
}

impl Message {
    pub fn kind(&self) -> MessageKind {
        match self.payload {
            Payload::Join { .. } => MessageKind::Join,
            Payload::JoinAck { .. } => MessageKind::JoinAck,
            Payload::GlobalModel(_) => MessageKind::GlobalModel,
            Payload::ClientUpdate(_) => MessageKind::ClientUpdate,
            Payload::RoundDone => MessageKind::RoundDone,
            Payload::Shutdown => MessageKind::Shutdown,
        }
    }
}

/// Encodes a message into a full frame (length prefix included).
pub fn encode(msg: &Message) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    match &msg.payload {
        Payload::Join {
            version,
            claimed_id,
        } => {
            payload.push(*version);
            payload.extend_from_slice(&claimed_id.to_be_bytes());
        }
        Payload::JoinAck {
            assigned_id,
            config_digest,
        } => {
            payload.extend_from_slice(&assigned_id.to_be_bytes());
            payload.extend_from_slice(&config_digest.to_be_bytes());
        }
        Payload::GlobalModel(params) => {
            payload.extend_from_slice(&(params.len() as u32).to_be_bytes());
            for &v in params.as_slice() {
                payload.extend_from_slice(&v.to_be_bytes());
            }
        }
        Payload::ClientUpdate(report) => {
            if report.client_id != msg.sender
                || report.round != msg.round
                || report.update.round != msg.round
            {
                return Err(FedSimError::Encoding(
                    "client update header fields disagree with the report".into(),
                ));
            }
            payload.extend_from_slice(&(report.update.entries.len() as u32).to_be_bytes());
            for &(idx, v) in &report.update.entries {
                payload.extend_from_slice(&idx.to_be_bytes());
                payload.extend_from_slice(&v.to_be_bytes());
            }
            payload.extend_from_slice(&report.avg_loss.to_be_bytes());
            payload.extend_from_slice(&report.n_samples.to_be_bytes());
            payload.extend_from_slice(&report.iterations.to_be_bytes());
            payload.extend_from_slice(&report.mean_loss_scale.to_be_bytes());
            payload.extend_from_slice(&(report.val_dice_per_class.len() as u32).to_be_bytes());
            for &(class, dice) in &report.val_dice_per_class {
                payload.extend_from_slice(&(class as u32).to_be_bytes());
                payload.extend_from_slice(&dice.to_be_bytes());
            }
        }
        Payload::RoundDone | Payload::Shutdown => {}
    }

    if payload.len() > MAX_BODY - HEADER_LEN {
        return Err(FedSimError::Encoding(format!(
            "payload of {} bytes exceeds the frame limit",
            payload.len()
        )));
    }
    let body_len = (HEADER_LEN + payload.len()) as u32;
    let mut frame = Vec::with_capacity(4 + body_len as usize);
    frame.extend_from_slice(&body_len.to_be_bytes());
    frame.push(msg.kind() as u8);
    frame.extend_from_slice(&msg.round.to_be_bytes());
    frame.extend_from_slice(&msg.sender.to_be_bytes());
    frame.extend_from_slice(&payload);
    Ok(frame)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(FedSimError::Protocol("truncated frame".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(FedSimError::Protocol(format!(
                "{} trailing bytes in frame",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Decodes a full frame (length prefix included) back into a message.
pub fn decode(frame: &[u8]) -> Result<Message> {
    if frame.len() < 4 + HEADER_LEN {
        return Err(FedSimError::Protocol(format!(
            "frame of {} bytes is shorter than a header",
            frame.len()
        )));
    }
    let body_len = u32::from_be_bytes(frame[..4].try_into().unwrap()) as usize;
    if body_len != frame.len() - 4 {
        return Err(FedSimError::Protocol(format!(
            "length field {} does not match body of {} bytes",
            body_len,
            frame.len() - 4
        )));
    }
    let mut c = Cursor {
        buf: &frame[4..],
        pos: 0,
    };
    let kind = MessageKind::from_tag(c.u8()?)?;
    let round = c.u32()?;
    let sender = c.u32()?;
    let payload = match kind {
        MessageKind::Join => Payload::Join {
            version: c.u8()?,
            claimed_id: c.u32()?,
        },
        MessageKind::JoinAck => Payload::JoinAck {
            assigned_id: c.u32()?,
            config_digest: c.u64()?,
        },
        MessageKind::GlobalModel => {
            let count = c.u32()? as usize;
            let mut values = Vec::with_capacity(count);
            for _ in 0..count {
                values.push(c.f64()?);
            }
            Payload::GlobalModel(
                ParamVector::new(values)
                    .map_err(|e| FedSimError::Protocol(format!("bad global model: {e}")))?,
            )
        }
        MessageKind::ClientUpdate => {
            let count = c.u32()? as usize;
            let mut entries = Vec::with_capacity(count);
            for _ in 0..count {
                let idx = c.u32()?;
                let v = c.f64()?;
                entries.push((idx, v));
            }
            let avg_loss = c.f64()?;
            let n_samples = c.u32()?;
            let iterations = c.u32()?;
            let mean_loss_scale = c.f64()?;
            let val_count = c.u32()? as usize;
            let mut val_dice_per_class = Vec::with_capacity(val_count);
            for _ in 0..val_count {
                let class = c.u32()?;
                if class > u8::MAX as u32 {
                    return Err(FedSimError::Protocol(format!("class id {class} too large")));
                }
                val_dice_per_class.push((class as u8, c.f64()?));
            }
            Payload::ClientUpdate(RoundReport {
                client_id: sender,
                round,
                update: SparseUpdate { entries, round },
                avg_loss,
                n_samples,
                val_dice_per_class,
                iterations,
                mean_loss_scale,
            })
        }
        MessageKind::RoundDone => Payload::RoundDone,
        MessageKind::Shutdown => Payload::Shutdown,
    };
    c.finish()?;
    Ok(Message {
        round,
        sender,
        payload,
    })
}

/// Reads one full frame from a stream.
pub fn read_frame(r: &mut impl std::io::Read) -> Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    r.read_exact(&mut len_bytes)
        .map_err(|e| FedSimError::Protocol(format!("reading frame length: {e}")))?;
    let body_len = u32::from_be_bytes(len_bytes) as usize;
    if !(HEADER_LEN..=MAX_BODY).contains(&body_len) {
        return Err(FedSimError::Protocol(format!(
            "implausible frame length {body_len}"
        )));
    }
    let mut frame = vec![0u8; 4 + body_len];
    frame[..4].copy_from_slice(&len_bytes);
    r.read_exact(&mut frame[4..])
        .map_err(|e| FedSimError::Protocol(format!("reading frame body: {e}")))?;
    Ok(frame)
}
