//! Scenario files.
//!
//! ```text
//! # comment
//! monitor A B
//! thread T1: lock A; sync p1; wait A 50 => timedout; unlock A
//! thread T2: sync p1; lock A; notify A; unlock A
//! expect grants A: T1 T2 T1
//! order p1 p2
//! permute p2 p3
//! ```
//!
//! `sync` ids are phases. The runner releases phases one at a time in
//! `order` (natural sort of the ids if absent), each once every thread has
//! settled. `permute` names phases whose relative release order the
//! explorer varies.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::time::Duration;

use cjm_core::WaitResult;
use thiserror::Error;

pub type MonitorId = usize;
pub type ThreadId = usize;
pub type PhaseId = usize;

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Step {
    Lock(MonitorId),
    Unlock(MonitorId),
    Wait(MonitorId, Option<Duration>),
    Notify(MonitorId),
    NotifyAll(MonitorId),
    Hash(MonitorId),
    Interrupt(ThreadId),
    Expire(ThreadId),
    Sync(PhaseId),
    Sleep(Duration),
    Owned(MonitorId, bool),
    Result(WaitResult),
    Waiters(MonitorId, Option<Vec<ThreadId>>),
    Recycled(MonitorId),
    Audit(MonitorId, AuditExpect),
}

/// Expected audit fields; `None` fields are not checked.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct AuditExpect {
    pub owner: Option<Option<ThreadId>>,
    pub entry: Option<Vec<ThreadId>>,
    pub waiters: Option<Vec<ThreadId>>,
}

/// A step plus the trace line it must produce, if given with `=>`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Action {
    pub step: Step,
    pub expect: Option<String>,
    pub line: usize,
}

#[derive(Clone, Debug, Default)]
pub struct Scenario {
    pub name: String,
    pub monitors: Vec<String>,
    pub threads: Vec<String>,
    pub programs: Vec<Vec<Action>>,
    pub phases: Vec<String>,
    /// Phase ids in release order.
    pub order: Vec<PhaseId>,
    pub permute: Vec<PhaseId>,
    pub expect_grants: Vec<(MonitorId, Vec<ThreadId>)>,
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("line {line}: {msg}")]
pub struct ParseError {
    pub line: usize,
    pub msg: String,
}

fn err<T>(line: usize, msg: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError {
        line,
        msg: msg.into(),
    })
}

/// Sort key that orders `p2` before `p10`.
fn natural_key(s: &str) -> (String, u64, String) {
    let digits_at = s.find(|c: char| c.is_ascii_digit()).unwrap_or(s.len());
    let (prefix, rest) = s.split_at(digits_at);
    let end = rest.find(|c: char| !c.is_ascii_digit()).unwrap_or(rest.len());
    let n = rest[..end].parse().unwrap_or(0);
    (prefix.to_string(), n, rest[end..].to_string())
}

struct Names<'a> {
    monitors: &'a HashMap<String, MonitorId>,
    threads: &'a HashMap<String, ThreadId>,
    phases: &'a mut Vec<String>,
}

impl Names<'_> {
    fn monitor(&self, line: usize, s: Option<&str>) -> Result<MonitorId, ParseError> {
        let s = s.ok_or(ParseError {
            line,
            msg: "missing monitor".into(),
        })?;
        self.monitors.get(s).copied().map_or_else(|| err(line, format!("undeclared monitor `{s}`")), Ok)
    }

    fn thread(&self, line: usize, s: &str) -> Result<ThreadId, ParseError> {
        self.threads.get(s).copied().map_or_else(|| err(line, format!("undeclared thread `{s}`")), Ok)
    }

    fn threads(&self, line: usize, list: &str) -> Result<Vec<ThreadId>, ParseError> {
        list.split([',', ' '])
            .filter(|t| !t.is_empty())
            .map(|t| self.thread(line, t))
            .collect()
    }

    fn phase(&mut self, s: &str) -> PhaseId {
        match self.phases.iter().position(|p| p == s) {
            Some(i) => i,
            None => {
                self.phases.push(s.to_string());
                self.phases.len() - 1
            }
        }
    }
}

fn parse_ms(line: usize, s: &str) -> Result<Duration, ParseError> {
    s.parse::<u64>()
        .map(Duration::from_millis)
        .or_else(|_| err(line, format!("bad milliseconds `{s}`")))
}

fn parse_result(line: usize, s: &str) -> Result<WaitResult, ParseError> {
    match s {
        "notified" => Ok(WaitResult::Notified),
        "timedout" => Ok(WaitResult::TimedOut),
        "interrupted" => Ok(WaitResult::Interrupted),
        _ => err(line, format!("unknown wait result `{s}`")),
    }
}

fn parse_step(names: &mut Names, line: usize, text: &str) -> Result<Action, ParseError> {
    let (body, expect) = match text.split_once("=>") {
        Some((b, e)) => (b.trim(), Some(e.trim().to_string())),
        None => (text.trim(), None),
    };
    let mut words = body.split_whitespace();
    let verb = words.next().unwrap_or_default();
    let rest: Vec<&str> = words.collect();
    let arg = rest.first().copied();
    let step = match verb {
        "lock" => Step::Lock(names.monitor(line, arg)?),
        "unlock" => Step::Unlock(names.monitor(line, arg)?),
        "wait" => {
            let m = names.monitor(line, arg)?;
            let t = rest.get(1).map(|s| parse_ms(line, s)).transpose()?;
            Step::Wait(m, t)
        }
        "notify" => Step::Notify(names.monitor(line, arg)?),
        "notifyall" => Step::NotifyAll(names.monitor(line, arg)?),
        "hash" => Step::Hash(names.monitor(line, arg)?),
        "interrupt" => Step::Interrupt(names.thread(line, arg.unwrap_or_default())?),
        "expire" => Step::Expire(names.thread(line, arg.unwrap_or_default())?),
        "sync" => match arg {
            Some(p) => Step::Sync(names.phase(p)),
            None => return err(line, "sync needs a phase id"),
        },
        "sleep" => Step::Sleep(parse_ms(line, arg.unwrap_or_default())?),
        "owned" => {
            let m = names.monitor(line, arg)?;
            let flag = match rest.get(1).copied() {
                Some("yes") | None => true,
                Some("no") => false,
                Some(x) => return err(line, format!("owned expects yes|no, got `{x}`")),
            };
            Step::Owned(m, flag)
        }
        "result" => Step::Result(parse_result(line, arg.unwrap_or_default())?),
        "waiters" => {
            let m = names.monitor(line, arg)?;
            let list = (rest.len() > 1)
                .then(|| names.threads(line, &rest[1..].join(" ")))
                .transpose()?;
            Step::Waiters(m, list)
        }
        "recycled" => Step::Recycled(names.monitor(line, arg)?),
        "audit" => {
            let m = names.monitor(line, arg)?;
            let mut e = AuditExpect::default();
            for kv in &rest[1..] {
                let Some((k, v)) = kv.split_once('=') else {
                    return err(line, format!("audit field `{kv}` is not key=value"));
                };
                match k {
                    "owner" if v == "-" => e.owner = Some(None),
                    "owner" => e.owner = Some(Some(names.thread(line, v)?)),
                    "entry" => e.entry = Some(names.threads(line, v)?),
                    "waiters" => e.waiters = Some(names.threads(line, v)?),
                    _ => return err(line, format!("unknown audit field `{k}`")),
                }
            }
            Step::Audit(m, e)
        }
        "" => return err(line, "empty step"),
        v => return err(line, format!("unknown step `{v}`")),
    };
    Ok(Action { step, expect, line })
}

impl Scenario {
    pub fn parse(name: &str, src: &str) -> Result<Scenario, ParseError> {
        let lines: Vec<(usize, &str)> = src
            .lines()
            .enumerate()
            .map(|(i, l)| (i + 1, l.split('#').next().unwrap_or("").trim()))
            .filter(|(_, l)| !l.is_empty())
            .collect();

        // Declarations first so steps can reference any thread.
        let mut monitors: HashMap<String, MonitorId> = HashMap::new();
        let mut threads: HashMap<String, ThreadId> = HashMap::new();
        let mut sc = Scenario {
            name: name.to_string(),
            ..Scenario::default()
        };
        for &(n, l) in &lines {
            if let Some(rest) = l.strip_prefix("monitor ") {
                for m in rest.split_whitespace() {
                    if monitors.insert(m.to_string(), sc.monitors.len()).is_some() {
                        return err(n, format!("monitor `{m}` declared twice"));
                    }
                    sc.monitors.push(m.to_string());
                }
            } else if let Some(rest) = l.strip_prefix("thread ") {
                let Some((t, _)) = rest.split_once(':') else {
                    return err(n, "expected `thread NAME: steps`");
                };
                let t = t.trim();
                if threads.insert(t.to_string(), sc.threads.len()).is_some() {
                    return err(n, format!("thread `{t}` declared twice"));
                }
                sc.threads.push(t.to_string());
            }
        }
        if sc.threads.is_empty() {
            return err(0, "no threads");
        }

        let mut phases = Vec::new();
        let mut order_line = None;
        let mut permute_line = None;
        for &(n, l) in &lines {
            let mut names = Names {
                monitors: &monitors,
                threads: &threads,
                phases: &mut phases,
            };
            if l.starts_with("monitor ") {
                continue;
            } else if let Some(rest) = l.strip_prefix("thread ") {
                let (_, steps) = rest.split_once(':').unwrap();
                let program = steps
                    .split(';')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| parse_step(&mut names, n, s))
                    .collect::<Result<Vec<_>, _>>()?;
                sc.programs.push(program);
            } else if let Some(rest) = l.strip_prefix("expect grants ") {
                let Some((m, list)) = rest.split_once(':') else {
                    return err(n, "expected `expect grants M: T...`");
                };
                let m = names.monitor(n, Some(m.trim()))?;
                sc.expect_grants.push((m, names.threads(n, list)?));
            } else if let Some(rest) = l.strip_prefix("order ") {
                order_line = Some((n, rest.split_whitespace().map(str::to_string).collect::<Vec<_>>()));
            } else if let Some(rest) = l.strip_prefix("permute ") {
                permute_line = Some((n, rest.split_whitespace().map(str::to_string).collect::<Vec<_>>()));
            } else {
                return err(n, format!("unrecognised line `{l}`"));
            }
        }
        sc.phases = phases;

        let lookup = |n: usize, p: &String| {
            sc.phases
                .iter()
                .position(|q| q == p)
                .map_or_else(|| err(n, format!("unknown phase `{p}`")), Ok)
        };
        sc.order = match order_line {
            Some((n, ids)) => {
                let order = ids.iter().map(|p| lookup(n, p)).collect::<Result<Vec<_>, _>>()?;
                let set: BTreeSet<_> = order.iter().copied().collect();
                if set.len() != order.len() || set.len() != sc.phases.len() {
                    return err(n, "order must list every phase exactly once");
                }
                order
            }
            None => {
                let mut order: Vec<PhaseId> = (0..sc.phases.len()).collect();
                order.sort_by_key(|&p| natural_key(&sc.phases[p]));
                order
            }
        };
        if let Some((n, ids)) = permute_line {
            sc.permute = ids.iter().map(|p| lookup(n, p)).collect::<Result<Vec<_>, _>>()?;
        }
        for (t, prog) in sc.programs.iter().enumerate() {
            let syncs: Vec<usize> = prog
                .iter()
                .filter_map(|a| match a.step {
                    Step::Sync(p) => Some(sc.order.iter().position(|&q| q == p).unwrap()),
                    _ => None,
                })
                .collect();
            if syncs.windows(2).any(|w| w[0] >= w[1]) {
                let line = prog.first().map_or(0, |a| a.line);
                return err(line, format!("thread {} syncs out of phase order", sc.threads[t]));
            }
        }
        Ok(sc)
    }

    pub fn participants(&self, phase: PhaseId) -> Vec<ThreadId> {
        (0..self.threads.len())
            .filter(|&t| self.programs[t].iter().any(|a| a.step == Step::Sync(phase)))
            .collect()
    }

    /// Release orders to explore: `order` with the `permute` phases
    /// reordered among their own positions, keeping each thread's syncs
    /// in program order.
    pub fn release_orders(&self) -> Vec<Vec<PhaseId>> {
        if self.permute.is_empty() {
            return vec![self.order.clone()];
        }
        let slots: Vec<usize> = self
            .order
            .iter()
            .enumerate()
            .filter(|(_, p)| self.permute.contains(p))
            .map(|(i, _)| i)
            .collect();
        let mut out = Vec::new();
        let mut items = self.permute.clone();
        items.sort_by_key(|p| self.order.iter().position(|q| q == p));
        permutations(&mut items, 0, &mut |perm| {
            let mut order = self.order.clone();
            for (&slot, &p) in slots.iter().zip(perm) {
                order[slot] = p;
            }
            if self.respects_program_order(&order) {
                out.push(order);
            }
        });
        out
    }

    fn respects_program_order(&self, order: &[PhaseId]) -> bool {
        self.programs.iter().all(|prog| {
            let pos: Vec<usize> = prog
                .iter()
                .filter_map(|a| match a.step {
                    Step::Sync(p) => order.iter().position(|&q| q == p),
                    _ => None,
                })
                .collect();
            pos.windows(2).all(|w| w[0] < w[1])
        })
    }
}

fn permutations(items: &mut Vec<PhaseId>, k: usize, f: &mut impl FnMut(&[PhaseId])) {
    if k == items.len() {
        f(items);
        return;
    }
    for i in k..items.len() {
        items.swap(k, i);
        permutations(items, k + 1, f);
        items.swap(k, i);
    }
}

impl fmt::Display for Step {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{self:?}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SRC: &str = "
        # two threads
        monitor A B
        thread T1: lock A; sync p1; wait A 50 => timedout; unlock A
        thread T2: sync p2; lock A; notify A => ok; unlock A; sync p10
        expect grants A: T1 T2 T1
    ";

    #[test]
    fn parses_programs() {
        let sc = Scenario::parse("t", SRC).unwrap();
        assert_eq!(sc.monitors, vec!["A", "B"]);
        assert_eq!(sc.threads, vec!["T1", "T2"]);
        assert_eq!(sc.programs[0][2].step, Step::Wait(0, Some(Duration::from_millis(50))));
        assert_eq!(sc.programs[0][2].expect.as_deref(), Some("timedout"));
        assert_eq!(sc.expect_grants, vec![(0, vec![0, 1, 0])]);
        let names: Vec<&str> = sc.order.iter().map(|&p| sc.phases[p].as_str()).collect();
        assert_eq!(names, vec!["p1", "p2", "p10"]);
    }

    #[test]
    fn reports_line_numbers() {
        let e = Scenario::parse("t", "thread T1: lock Z").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.msg.contains("undeclared monitor"));
        let e = Scenario::parse("t", "monitor A\n\nthread T1: frob A").unwrap_err();
        assert_eq!(e.line, 3);
        let e = Scenario::parse("t", "monitor A\nthread T1: interrupt T9").unwrap_err();
        assert!(e.msg.contains("undeclared thread"));
    }

    #[test]
    fn audit_fields() {
        let sc = Scenario::parse(
            "t",
            "monitor A\nthread T1: audit A owner=- entry=T1,T2 waiters=T2\nthread T2: sleep 1",
        )
        .unwrap();
        let Step::Audit(0, e) = &sc.programs[0][0].step else { panic!() };
        assert_eq!(e.owner, Some(None));
        assert_eq!(e.entry, Some(vec![0, 1]));
        assert_eq!(e.waiters, Some(vec![1]));
    }

    #[test]
    fn permutations_respect_program_order() {
        let sc = Scenario::parse(
            "t",
            "monitor A
             thread T1: sync a1; sync a2
             thread T2: sync b1
             order a1 b1 a2
             permute a1 b1 a2",
        )
        .unwrap();
        // a1 must precede a2: 3 of the 6 permutations survive
        assert_eq!(sc.release_orders().len(), 3);
    }
}
