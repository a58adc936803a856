use alloc::vec::Vec;

/// Image header.
pub const MAGIC: &[u8; 4] = b"CFW1";
pub const VERSION: u8 = 1;
/// Images larger than the target's memory cannot be flashed.
pub const MAX_IMAGE_BYTES: usize = 64 * 1024;

#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    PushInt(i64),
    PushNum(f64),
    PushBytes(u16),
    RxData,
    RxCount,
    Occupancy,
    Add,
    Sub,
    Mul,
    Div,
    Eq,
    SetChannel(u32),
    SetPower(f64),
    Tx {
        payload: u16,
        repeat: u32,
        interval_ms: u32,
    },
    Rx {
        timeout_ms: u32,
    },
    Sense {
        window_ms: u32,
    },
    Report,
    /// Enters a counted loop; `count == 0` jumps straight to `exit`.
    Loop {
        count: u32,
        exit: u32,
    },
    LoopForever,
    /// Closes the innermost loop; `start` is the first op of the body.
    EndLoop {
        start: u32,
    },
    Halt,
}

impl Op {
    fn opcode(&self) -> u8 {
        match self {
            Op::PushInt(_) => 0x01,
            Op::PushNum(_) => 0x02,
            Op::PushBytes(_) => 0x03,
            Op::RxData => 0x04,
            Op::RxCount => 0x05,
            Op::Occupancy => 0x06,
            Op::Add => 0x10,
            Op::Sub => 0x11,
            Op::Mul => 0x12,
            Op::Div => 0x13,
            Op::Eq => 0x14,
            Op::SetChannel(_) => 0x20,
            Op::SetPower(_) => 0x21,
            Op::Tx { .. } => 0x22,
            Op::Rx { .. } => 0x23,
            Op::Sense { .. } => 0x24,
            Op::Report => 0x25,
            Op::Loop { .. } => 0x30,
            Op::LoopForever => 0x31,
            Op::EndLoop { .. } => 0x32,
            Op::Halt => 0x3f,
        }
    }

    /// `(popped, pushed)` operand counts.
    fn stack_effect(&self) -> (usize, usize) {
        match self {
            Op::PushInt(_)
            | Op::PushNum(_)
            | Op::PushBytes(_)
            | Op::RxData
            | Op::RxCount
            | Op::Occupancy => (0, 1),
            Op::Add | Op::Sub | Op::Mul | Op::Div | Op::Eq => (2, 1),
            Op::Report => (1, 0),
            _ => (0, 0),
        }
    }

    fn is_expression(&self) -> bool {
        !matches!(self.stack_effect(), (0, 0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BytecodeError {
    #[error("missing CFW1 header")]
    BadMagic,
    #[error("unsupported bytecode version {0}")]
    BadVersion(u8),
    #[error("image truncated")]
    Truncated,
    #[error("unknown opcode {opcode:#04x} at op {index}")]
    UnknownOpcode { index: usize, opcode: u8 },
    #[error("trailing bytes after last op")]
    TrailingBytes,
    #[error("op {0} references a missing constant")]
    BadConstant(usize),
    #[error("op {0} jumps out of range")]
    BadJump(usize),
    #[error("op {0} leaves the operand stack unbalanced")]
    Unbalanced(usize),
    #[error("image of {0} bytes exceeds target memory")]
    TooLarge(usize),
}

/// Compiled firmware: constant pool plus a flat op list.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Bytecode {
    pub consts: Vec<Vec<u8>>,
    pub ops: Vec<Op>,
}

impl Bytecode {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(self.consts.len() as u16).to_le_bytes());
        for c in &self.consts {
            out.extend_from_slice(&(c.len() as u16).to_le_bytes());
            out.extend_from_slice(c);
        }
        out.extend_from_slice(&(self.ops.len() as u32).to_le_bytes());
        for op in &self.ops {
            out.push(op.opcode());
            match *op {
                Op::PushInt(v) => out.extend_from_slice(&v.to_le_bytes()),
                Op::PushNum(v) | Op::SetPower(v) => {
                    out.extend_from_slice(&v.to_bits().to_le_bytes())
                }
                Op::PushBytes(i) => out.extend_from_slice(&i.to_le_bytes()),
                Op::SetChannel(v)
                | Op::Rx { timeout_ms: v }
                | Op::Sense { window_ms: v }
                | Op::EndLoop { start: v } => out.extend_from_slice(&v.to_le_bytes()),
                Op::Tx {
                    payload,
                    repeat,
                    interval_ms,
                } => {
                    out.extend_from_slice(&payload.to_le_bytes());
                    out.extend_from_slice(&repeat.to_le_bytes());
                    out.extend_from_slice(&interval_ms.to_le_bytes());
                }
                Op::Loop { count, exit } => {
                    out.extend_from_slice(&count.to_le_bytes());
                    out.extend_from_slice(&exit.to_le_bytes());
                }
                _ => {}
            }
        }
        out
    }

    /// Parses and validates an image.
    pub fn decode(bytes: &[u8]) -> Result<Self, BytecodeError> {
        if bytes.len() > MAX_IMAGE_BYTES {
            return Err(BytecodeError::TooLarge(bytes.len()));
        }
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(BytecodeError::BadMagic);
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(BytecodeError::BadVersion(version));
        }
        let n_consts = r.u16()? as usize;
        let mut consts = Vec::with_capacity(n_consts.min(1024));
        for _ in 0..n_consts {
            let len = r.u16()? as usize;
            consts.push(r.take(len)?.to_vec());
        }
        let n_ops = r.u32()? as usize;
        let mut ops = Vec::with_capacity(n_ops.min(MAX_IMAGE_BYTES));
        for index in 0..n_ops {
            let opcode = r.u8()?;
            let op = match opcode {
                0x01 => Op::PushInt(r.u64()? as i64),
                0x02 => Op::PushNum(f64::from_bits(r.u64()?)),
                0x03 => Op::PushBytes(r.u16()?),
                0x04 => Op::RxData,
                0x05 => Op::RxCount,
                0x06 => Op::Occupancy,
                0x10 => Op::Add,
                0x11 => Op::Sub,
                0x12 => Op::Mul,
                0x13 => Op::Div,
                0x14 => Op::Eq,
                0x20 => Op::SetChannel(r.u32()?),
                0x21 => Op::SetPower(f64::from_bits(r.u64()?)),
                0x22 => Op::Tx {
                    payload: r.u16()?,
                    repeat: r.u32()?,
                    interval_ms: r.u32()?,
                },
                0x23 => Op::Rx {
                    timeout_ms: r.u32()?,
                },
                0x24 => Op::Sense {
                    window_ms: r.u32()?,
                },
                0x25 => Op::Report,
                0x30 => Op::Loop {
                    count: r.u32()?,
                    exit: r.u32()?,
                },
                0x31 => Op::LoopForever,
                0x32 => Op::EndLoop { start: r.u32()? },
                0x3f => Op::Halt,
                _ => return Err(BytecodeError::UnknownOpcode { index, opcode }),
            };
            ops.push(op);
        }
        if r.pos != bytes.len() {
            return Err(BytecodeError::TrailingBytes);
        }
        let code = Self { consts, ops };
        code.validate()?;
        Ok(code)
    }

    /// Checks constant references, loop structure and that every statement
    /// starts and ends with an empty operand stack.
    pub fn validate(&self) -> Result<(), BytecodeError> {
        let mut depth = 0usize;
        let mut loops: Vec<usize> = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            let (pop, push) = op.stack_effect();
            if !op.is_expression() && depth != 0 {
                return Err(BytecodeError::Unbalanced(i));
            }
            if depth < pop {
                return Err(BytecodeError::Unbalanced(i));
            }
            depth = depth - pop + push;
            match *op {
                Op::PushBytes(c) | Op::Tx { payload: c, .. } if c as usize >= self.consts.len() => {
                    return Err(BytecodeError::BadConstant(i));
                }
                Op::Loop { exit, .. } => {
                    if exit as usize > self.ops.len() || (exit as usize) <= i {
                        return Err(BytecodeError::BadJump(i));
                    }
                    loops.push(i);
                }
                Op::LoopForever => loops.push(i),
                Op::EndLoop { start } => {
                    let open = loops.pop().ok_or(BytecodeError::BadJump(i))?;
                    if start as usize != open + 1 {
                        return Err(BytecodeError::BadJump(i));
                    }
                    if let Op::Loop { exit, .. } = self.ops[open] {
                        if exit as usize != i + 1 {
                            return Err(BytecodeError::BadJump(open));
                        }
                    }
                }
                _ => {}
            }
        }
        if depth != 0 {
            return Err(BytecodeError::Unbalanced(self.ops.len()));
        }
        if let Some(open) = loops.pop() {
            return Err(BytecodeError::BadJump(open));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BytecodeError> {
        let end = self.pos.checked_add(n).ok_or(BytecodeError::Truncated)?;
        let s = self
            .buf
            .get(self.pos..end)
            .ok_or(BytecodeError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, BytecodeError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, BytecodeError> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, BytecodeError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, BytecodeError> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(u64::from_le_bytes(a))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn sample() -> Bytecode {
        Bytecode {
            consts: vec![vec![0xde, 0xad]],
            ops: vec![
                Op::SetChannel(1),
                Op::Loop { count: 2, exit: 4 },
                Op::Tx {
                    payload: 0,
                    repeat: 1,
                    interval_ms: 0,
                },
                Op::EndLoop { start: 2 },
                Op::PushInt(1),
                Op::PushNum(2.5),
                Op::Eq,
                Op::Report,
            ],
        }
    }

    #[test]
    fn encode_decode_round_trip() {
        let code = sample();
        let bytes = code.encode();
        assert_eq!(&bytes[..4], MAGIC);
        assert_eq!(Bytecode::decode(&bytes).unwrap(), code);
    }

    #[test]
    fn rejects_bad_header_and_truncation() {
        let mut bytes = sample().encode();
        assert_eq!(
            Bytecode::decode(&bytes[..bytes.len() - 1]),
            Err(BytecodeError::Truncated)
        );
        bytes[0] = b'X';
        assert_eq!(Bytecode::decode(&bytes), Err(BytecodeError::BadMagic));
    }

    #[test]
    fn rejects_unbalanced_and_bad_jumps() {
        let mut code = sample();
        code.ops.insert(0, Op::PushInt(3));
        assert!(matches!(code.validate(), Err(BytecodeError::Unbalanced(_))));

        let mut code = sample();
        code.ops[3] = Op::EndLoop { start: 0 };
        assert!(matches!(code.validate(), Err(BytecodeError::BadJump(_))));

        let mut code = sample();
        code.ops[2] = Op::Tx {
            payload: 7,
            repeat: 1,
            interval_ms: 0,
        };
        assert_eq!(code.validate(), Err(BytecodeError::BadConstant(2)));
    }
}
