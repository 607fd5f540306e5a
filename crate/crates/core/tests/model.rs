mod common;

use std::time::Duration;

use cjm_core::{IllegalMonitorState, MarkVariant, Monitor, WaitResult};
use common::{runtime, STRATEGIES};
use proptest::prelude::*;

#[derive(Clone, Copy, Debug)]
enum Op {
    Lock(usize),
    Unlock(usize),
    Hash(usize),
    Wait(usize),
    Notify(usize),
    NotifyAll(usize),
}

fn op() -> impl Strategy<Value = Op> {
    let m = 0..3usize;
    prop_oneof![
        4 => m.clone().prop_map(Op::Lock),
        4 => m.clone().prop_map(Op::Unlock),
        2 => m.clone().prop_map(Op::Hash),
        1 => m.clone().prop_map(Op::Wait),
        1 => m.clone().prop_map(Op::Notify),
        1 => m.prop_map(Op::NotifyAll),
    ]
}

/// Holds per monitor: `None` unheld, `Some(d)` held with recursion depth d.
#[derive(Default)]
struct Model {
    held: [Option<u32>; 3],
    hash: [Option<u64>; 3],
}

impl Model {
    fn needs_owner(&self, i: usize) -> Result<(), IllegalMonitorState> {
        self.held[i].map(|_| ()).ok_or(IllegalMonitorState)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn single_thread_matches_model(ops in proptest::collection::vec(op(), 1..60)) {
        for s in STRATEGIES {
            let rt = runtime(s);
            let ctx = rt.attach();
            let ms = [Monitor::new(), Monitor::new(), Monitor::new()];
            let mut model = Model::default();
            let mut max_holds = 0usize;
            for &o in &ops {
                match o {
                    Op::Lock(i) => {
                        ctx.lock(&ms[i]);
                        model.held[i] = Some(model.held[i].map_or(0, |d| d + 1));
                    }
                    Op::Unlock(i) => {
                        let expect = model.needs_owner(i);
                        prop_assert_eq!(ctx.unlock(&ms[i]), expect);
                        model.held[i] = model.held[i].and_then(|d| d.checked_sub(1));
                    }
                    Op::Hash(i) => {
                        let h = ctx.hash_of(&ms[i]);
                        prop_assert!(h != 0);
                        prop_assert_eq!(*model.hash[i].get_or_insert(h), h);
                    }
                    Op::Wait(i) => {
                        let expect = model.needs_owner(i).map(|_| WaitResult::TimedOut);
                        prop_assert_eq!(ctx.wait(&ms[i], Some(Duration::from_millis(1))), expect);
                    }
                    Op::Notify(i) => prop_assert_eq!(ctx.notify(&ms[i]), model.needs_owner(i)),
                    Op::NotifyAll(i) => prop_assert_eq!(ctx.notify_all(&ms[i]), model.needs_owner(i)),
                }
                max_holds = max_holds.max(model.held.iter().flatten().count());
                for i in 0..3 {
                    prop_assert_eq!(ctx.nesting(&ms[i]), model.held[i]);
                    let snap = rt.audit(&ms[i]).map_err(|e| TestCaseError::fail(e.to_string()))?;
                    match snap.mark {
                        MarkVariant::Queued(_) => prop_assert!(model.held[i].is_some()),
                        _ => prop_assert!(model.held[i].is_none()),
                    }
                    if let (Some(h), Some(seen)) = (snap.hash(), model.hash[i]) {
                        prop_assert_eq!(h, seen);
                    }
                }
            }
            prop_assert!(ctx.footprint().allocated <= max_holds + 1);
        }
    }
}
