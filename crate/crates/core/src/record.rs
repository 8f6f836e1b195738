//! Binary record format for trajectories.
//!
//! Layout, all integers and floats little-endian:
//!
//! ```text
//! u8   role            0 = main, 1 = sub
//! u8   flags           bit 0: terminated, bit 1: subtask key present
//! u32  step count
//! u32  output length
//! u32  format version
//! u32  state dimension
//! u32  subtask key     (0 when absent)
//! f64  output[output length]          token ids
//! per step:
//!   f64 action, f64 behavior_logprob, f64 reward, f64 state[state dimension]
//! ```
//!
//! The same records are what the shared store and the log files carry.

use crate::error::{Error, Result};
use crate::trajectory::{Role, Step, Token, Trajectory};

pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 1 + 1 + 4 * 5;

const FLAG_TERMINATED: u8 = 1;
const FLAG_SUBTASK: u8 = 2;

/// Encodes a validated trajectory. Invalid input (e.g. a NaN reward) is
/// rejected before any bytes are produced.
pub fn serialize_trajectory(t: &Trajectory) -> Result<Vec<u8>> {
    t.validate()?;
    let dim = t.steps.first().map_or(0, |s| s.state.len());
    let mut buf = Vec::with_capacity(HEADER_LEN + 8 * (t.output.len() + t.steps.len() * (dim + 3)));
    buf.push(t.role.as_byte());
    let mut flags = 0;
    if t.terminated {
        flags |= FLAG_TERMINATED;
    }
    if t.subtask_key.is_some() {
        flags |= FLAG_SUBTASK;
    }
    buf.push(flags);
    for v in [
        t.steps.len() as u32,
        t.output.len() as u32,
        FORMAT_VERSION,
        dim as u32,
        t.subtask_key.unwrap_or(0),
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for tok in &t.output {
        buf.extend_from_slice(&f64::from(tok.0).to_le_bytes());
    }
    for s in &t.steps {
        buf.extend_from_slice(&f64::from(s.action).to_le_bytes());
        buf.extend_from_slice(&s.behavior_logprob.to_le_bytes());
        buf.extend_from_slice(&s.reward.to_le_bytes());
        for x in &s.state {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

pub fn deserialize_trajectory(bytes: &[u8]) -> Result<Trajectory> {
    let mut r = Reader::new(bytes);
    let t = read_trajectory(&mut r)?;
    r.finish()?;
    Ok(t)
}

fn read_trajectory(r: &mut Reader<'_>) -> Result<Trajectory> {
    let role_byte = r.u8()?;
    let role = Role::from_byte(role_byte)
        .ok_or_else(|| Error::Decode(format!("unknown role byte {role_byte}")))?;
    let flags = r.u8()?;
    let n_steps = r.u32()? as usize;
    let n_out = r.u32()? as usize;
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Decode(format!(
            "unsupported record version {version}"
        )));
    }
    let dim = r.u32()? as usize;
    let key = r.u32()?;

    let mut output = Vec::with_capacity(n_out);
    for _ in 0..n_out {
        output.push(Token(r.index_f64("output token")?));
    }
    let mut steps = Vec::with_capacity(n_steps);
    for _ in 0..n_steps {
        let action = r.index_f64("action")?;
        let behavior_logprob = r.f64()?;
        let reward = r.f64()?;
        let state = (0..dim).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        steps.push(Step {
            state,
            action,
            behavior_logprob,
            reward,
        });
    }
    let t = Trajectory {
        role,
        steps,
        output,
        terminated: flags & FLAG_TERMINATED != 0,
        subtask_key: (flags & FLAG_SUBTASK != 0).then_some(key),
    };
    t.validate()
        .map_err(|e| Error::Decode(format!("decoded trajectory is invalid: {e}")))?;
    Ok(t)
}

/// Length-prefixed concatenation of trajectory records.
pub fn serialize_trajectories(ts: &[Trajectory]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    buf.extend_from_slice(&(ts.len() as u32).to_le_bytes());
    for t in ts {
        let rec = serialize_trajectory(t)?;
        buf.extend_from_slice(&(rec.len() as u32).to_le_bytes());
        buf.extend_from_slice(&rec);
    }
    Ok(buf)
}

pub fn deserialize_trajectories(bytes: &[u8]) -> Result<Vec<Trajectory>> {
    let mut r = Reader::new(bytes);
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let len = r.u32()? as usize;
        out.push(deserialize_trajectory(r.take(len)?)?);
    }
    r.finish()?;
    Ok(out)
}

/// Cursor over a little-endian byte record.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::Decode(format!(
                    "record truncated: need {n} bytes at offset {}, have {}",
                    self.pos,
                    self.bytes.len() - self.pos
                ))
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// An f64 field that must hold a small non-negative integer.
    fn index_f64(&mut self, what: &str) -> Result<u32> {
        let x = self.f64()?;
        if x >= 0.0 && x <= f64::from(u32::MAX) && x.fract() == 0.0 {
            Ok(x as u32)
        } else {
            Err(Error::Decode(format!(
                "{what} field holds {x}, not an index"
            )))
        }
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos == self.bytes.len() {
            Ok(())
        } else {
            Err(Error::Decode(format!(
                "{} trailing bytes after record",
                self.bytes.len() - self.pos
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn three_step_main() -> Trajectory {
        Trajectory {
            role: Role::Main,
            steps: (0..3)
                .map(|t| Step {
                    state: vec![1.0, -0.25 * t as f64, 1e-300],
                    action: t as u32 + 2,
                    behavior_logprob: -0.1 * (t + 1) as f64,
                    reward: 0.7,
                })
                .collect(),
            output: vec![Token::BEGIN, Token::END],
            terminated: true,
            subtask_key: None,
        }
    }

    #[test]
    fn empty_trajectory_is_header_only() {
        let t = Trajectory::new(Role::Sub);
        let bytes = serialize_trajectory(&t).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN);
        assert_eq!(deserialize_trajectory(&bytes).unwrap(), t);
    }

    #[test]
    fn three_step_main_round_trips() {
        let t = three_step_main();
        let bytes = serialize_trajectory(&t).unwrap();
        assert_eq!(bytes.len(), HEADER_LEN + 8 * (2 + 3 * 6));
        assert_eq!(bytes[0], 0);
        assert_eq!(&bytes[2..6], &3u32.to_le_bytes());
        assert_eq!(&bytes[6..10], &2u32.to_le_bytes());
        assert_eq!(deserialize_trajectory(&bytes).unwrap(), t);
    }

    #[test]
    fn nan_reward_rejected_before_encoding() {
        let mut t = three_step_main();
        t.steps[1].reward = f64::NAN;
        assert!(matches!(serialize_trajectory(&t), Err(Error::Invalid(_))));
    }

    #[test]
    fn truncated_and_padded_records_fail() {
        let bytes = serialize_trajectory(&three_step_main()).unwrap();
        assert!(deserialize_trajectory(&bytes[..bytes.len() - 1]).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(deserialize_trajectory(&long).is_err());
        let mut bad_role = bytes;
        bad_role[0] = 7;
        assert!(deserialize_trajectory(&bad_role).is_err());
    }

    fn arb_trajectory() -> impl Strategy<Value = Trajectory> {
        (
            any::<bool>(),
            0usize..4,
            prop::collection::vec(0u32..40, 0..6),
            prop::option::of(0u32..8),
            1usize..5,
        )
            .prop_flat_map(|(sub, n, output, key, dim)| {
                let step = (
                    prop::collection::vec(-1e6f64..1e6, dim),
                    0u32..64,
                    -50f64..=0.0,
                    -2f64..2.0,
                )
                    .prop_map(|(state, action, lp, reward)| Step {
                        state,
                        action,
                        behavior_logprob: lp,
                        reward,
                    });
                prop::collection::vec(step, n).prop_map(move |steps| Trajectory {
                    role: if sub { Role::Sub } else { Role::Main },
                    terminated: !steps.is_empty(),
                    steps,
                    output: output.iter().copied().map(Token).collect(),
                    subtask_key: if sub { key } else { None },
                })
            })
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(ts in prop::collection::vec(arb_trajectory(), 0..4)) {
            for t in &ts {
                let bytes = serialize_trajectory(t).unwrap();
                let back = deserialize_trajectory(&bytes).unwrap();
                prop_assert_eq!(serialize_trajectory(&back).unwrap(), bytes);
                prop_assert_eq!(&back, t);
            }
            let packed = serialize_trajectories(&ts).unwrap();
            prop_assert_eq!(deserialize_trajectories(&packed).unwrap(), ts);
        }
    }
}
