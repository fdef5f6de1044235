//! Operation histories recorded by the deterministic executor, with a
//! line-oriented text form for failure reproduction.

use std::fmt::Write as _;

/// One set operation, as issued by a worker script.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Op {
    Insert(u64),
    Remove(u64),
    Find(u64),
    /// Closed interval.
    Range(u64, u64),
    /// Range query using the rejected tag-only validation, bounded to the
    /// given attempt count. Test subject for the livelock demonstration.
    RangeNaive(u64, u64, u32),
}

/// A recorded return value.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Ret {
    Bool(bool),
    Keys(Vec<u64>),
    /// Bounded naive query that gave up.
    Exhausted,
}

/// One completed or pending operation in a history. Timestamps are logical
/// clock ticks: totally ordered per thread, partially across threads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OpRecord {
    pub tid: usize,
    pub op: Op,
    pub invoke: u64,
    /// `None` while the operation never responded (halted thread).
    pub response: Option<u64>,
    pub ret: Option<Ret>,
}

impl OpRecord {
    pub fn completed(&self) -> bool {
        self.response.is_some()
    }
}

/// A complete run: every invocation either responded or belongs to a thread
/// that was halted.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct History {
    pub records: Vec<OpRecord>,
}

impl History {
    /// One record per line: `tid invoke response op args... -> ret`.
    pub fn to_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            let resp = r
                .response
                .map(|x| x.to_string())
                .unwrap_or_else(|| "-".to_string());
            let op = match r.op {
                Op::Insert(x) => format!("insert {x}"),
                Op::Remove(x) => format!("remove {x}"),
                Op::Find(x) => format!("find {x}"),
                Op::Range(lo, hi) => format!("range {lo} {hi}"),
                Op::RangeNaive(lo, hi, cap) => format!("range_naive {lo} {hi} {cap}"),
            };
            let ret = match &r.ret {
                None => "-".to_string(),
                Some(Ret::Bool(b)) => b.to_string(),
                Some(Ret::Exhausted) => "exhausted".to_string(),
                Some(Ret::Keys(keys)) => {
                    let inner: Vec<String> = keys.iter().map(|k| k.to_string()).collect();
                    format!("[{}]", inner.join(","))
                }
            };
            let _ = writeln!(out, "{} {} {} {} -> {}", r.tid, r.invoke, resp, op, ret);
        }
        out
    }

    pub fn parse(text: &str) -> Result<History, String> {
        let mut records = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let err = |m: &str| format!("line {}: {m}", lineno + 1);
            let (head, ret) = line
                .split_once(" -> ")
                .ok_or_else(|| err("missing ' -> '"))?;
            let mut it = head.split_whitespace();
            let tid = it.next().ok_or_else(|| err("missing tid"))?;
            let invoke = it.next().ok_or_else(|| err("missing invoke"))?;
            let response = it.next().ok_or_else(|| err("missing response"))?;
            let kind = it.next().ok_or_else(|| err("missing op"))?;
            let mut num = |name: &str| -> Result<u64, String> {
                it.next()
                    .ok_or_else(|| err(&format!("missing {name}")))?
                    .parse()
                    .map_err(|_| err(&format!("bad {name}")))
            };
            let op = match kind {
                "insert" => Op::Insert(num("key")?),
                "remove" => Op::Remove(num("key")?),
                "find" => Op::Find(num("key")?),
                "range" => Op::Range(num("lo")?, num("hi")?),
                "range_naive" => Op::RangeNaive(num("lo")?, num("hi")?, num("cap")? as u32),
                other => return Err(err(&format!("unknown op {other}"))),
            };
            let ret = match ret {
                "-" => None,
                "true" => Some(Ret::Bool(true)),
                "false" => Some(Ret::Bool(false)),
                "exhausted" => Some(Ret::Exhausted),
                s if s.starts_with('[') && s.ends_with(']') => {
                    let inner = &s[1..s.len() - 1];
                    let keys = if inner.is_empty() {
                        Vec::new()
                    } else {
                        inner
                            .split(',')
                            .map(|x| x.parse().map_err(|_| err("bad key list")))
                            .collect::<Result<_, _>>()?
                    };
                    Some(Ret::Keys(keys))
                }
                _ => return Err(err("bad return value")),
            };
            records.push(OpRecord {
                tid: tid.parse().map_err(|_| err("bad tid"))?,
                op,
                invoke: invoke.parse().map_err(|_| err("bad invoke"))?,
                response: if response == "-" {
                    None
                } else {
                    Some(response.parse().map_err(|_| err("bad response"))?)
                },
                ret,
            });
        }
        Ok(History { records })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lines_round_trip() {
        let h = History {
            records: vec![
                OpRecord {
                    tid: 0,
                    op: Op::Insert(5),
                    invoke: 1,
                    response: Some(4),
                    ret: Some(Ret::Bool(true)),
                },
                OpRecord {
                    tid: 1,
                    op: Op::Range(2, 9),
                    invoke: 2,
                    response: Some(7),
                    ret: Some(Ret::Keys(vec![5, 6])),
                },
                OpRecord {
                    tid: 2,
                    op: Op::Remove(5),
                    invoke: 3,
                    response: None,
                    ret: None,
                },
            ],
        };
        assert_eq!(History::parse(&h.to_lines()).unwrap(), h);
    }
}
