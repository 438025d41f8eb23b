// SPDX-License-Identifier: Apache-2.0

//! Acceptance criteria, one pass/fail line each. Runs without the libtest
//! harness so the lines are always printed; exits non-zero on any failure.

use std::collections::{BTreeSet, HashSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fasco_core::coherence::MaintenanceSite;
use fasco_core::granule::{WorldId, GRANULE_SIZE};
use fasco_core::harness::adversary::ActionOutcome;
use fasco_core::harness::audit::sentinel_sweep;
use fasco_core::harness::lifecycle::run_lifecycle;
use fasco_core::harness::run::execute;
use fasco_core::harness::scenario::{self, layout};
use fasco_core::harness::suite::{
    adversary_differential, clone_revoke_trials, coherence_matrix, ownership_fuzz,
    pending_read_world, tamper_catalog, temporal_execution, TamperKind, IAGO_REQUEST, SENTINEL,
};
use fasco_core::rmm::{Mutations, SyscallReply};
use fasco_core::rtt::Ipa;
use fasco_core::trace::Event;

const SEED: u64 = 20_240_611;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed < Duration::from_secs(limit_secs)
}

/// Fuzzed ownership operations, then every realm granule refuses the host.
fn ownership() -> Outcome {
    let t = Instant::now();
    let r = ownership_fuzz(SEED, 10_000);
    let el = t.elapsed();
    outcome(
        r.realm_owned > 0
            && r.host_faulted == r.realm_owned
            && r.probe_mismatches == 0
            && within(el, 10),
        format!(
            "{} ops, host faulted on {}/{} realm granules, {} cross-realm breaches, {:.2?}",
            r.ops, r.host_faulted, r.realm_owned, r.exclusivity_breaches, el
        ),
    )
}

/// Clones match their source; after revoke only the container translates.
fn clone_revoke() -> Outcome {
    let t = Instant::now();
    let r = clone_revoke_trials(SEED, 200, true);
    let el = t.elapsed();
    outcome(
        r.mapped > 0
            && r.clone_mismatches == 0
            && r.clone_overreach == 0
            && r.source_empty == r.mapped
            && r.container_translated == r.mapped
            && within(el, 10),
        format!(
            "{} shapes, {} mapped pages, {} clone mismatches, empty {}/{}, translated {}/{}, {:.2?}",
            r.shapes,
            r.mapped,
            r.clone_mismatches,
            r.source_empty,
            r.mapped,
            r.container_translated,
            r.mapped,
            el
        ),
    )
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    hay.windows(needle.len()).any(|w| w == needle)
}

/// No trace of a destroyed container's sentinel anywhere the host can see.
fn temporal() -> Outcome {
    let mut exec = temporal_execution(SEED, &Mutations::none()).expect("temporal run");
    // The sentinel really was written before teardown.
    let written = exec.containers.iter().all(|c| {
        c.exit == Some(0)
            && c.observations.iter().any(|o| {
                matches!(o, fasco_core::rmm::Observation::Load { data, .. } if data[..] == SENTINEL)
            })
    });
    // Raw pool contents of host-owned granules, independent of any access path.
    let raw_hits = exec
        .world
        .granules()
        .iter()
        .filter(|g| g.owner == WorldId::NormalWorld && contains(g.contents(), &SENTINEL))
        .count();
    let host_owned = exec
        .world
        .granules()
        .iter()
        .filter(|g| g.owner == WorldId::NormalWorld)
        .count();
    // Every granule a container held is back with the host.
    let returned = exec
        .world
        .ever_delegated()
        .iter()
        .filter(|&&g| exec.world.granules().owner(g) == Ok(WorldId::NormalWorld))
        .count();
    let (readable, swept_hits) = sentinel_sweep(&mut exec.world, &SENTINEL);
    outcome(
        written && returned > 0 && raw_hits == 0 && swept_hits == 0 && readable >= host_owned,
        format!(
            "{} containers (written={written}), {returned} granules returned, {readable} granules host-readable ({host_owned} host-owned, the rest shared), {} sentinel hits",
            exec.containers.len(),
            raw_hits + swept_hits
        ),
    )
}

/// A reply the container may receive for a read of `IAGO_REQUEST` bytes
/// staged through a `cap`-byte buffer at `buf`.
fn oracle_accepts(r: &SyscallReply, buf: u64, cap: u64) -> bool {
    let limit = IAGO_REQUEST.min(cap);
    if r.retval < 0 {
        return r.out_len == 0 && r.retval >= -4095 && r.errno == -r.retval;
    }
    r.errno == 0
        && r.out_len <= limit
        && r.retval as u64 == r.out_len
        && (r.out_len == 0 || r.out_ptr == Some(Ipa(buf)))
}

fn hostile_reply(rng: &mut ChaCha8Rng, buf: u64, cap: u64) -> SyscallReply {
    let out_len = match rng.gen_range(0..6) {
        0 => 0,
        1 => rng.gen_range(0..=IAGO_REQUEST),
        2 => IAGO_REQUEST + rng.gen_range(1..64),
        3 => cap + rng.gen_range(0..64),
        4 => rng.gen(),
        _ => rng.gen_range(0..3 * cap),
    };
    let out_ptr = match rng.gen_range(0..5) {
        0 => None,
        1 | 2 => Some(Ipa(buf)),
        3 => Some(Ipa(buf + rng.gen_range(1..cap))),
        _ => Some(Ipa(rng.gen_range(0..buf * 2))),
    };
    let retval: i64 = match rng.gen_range(0..5) {
        0 | 1 => out_len as i64,
        2 => -(rng.gen_range(1..5000)),
        3 => out_len as i64 - 1,
        _ => rng.gen(),
    };
    let errno = if rng.gen_bool(0.8) {
        if retval < 0 {
            -retval
        } else {
            0
        }
    } else {
        rng.gen_range(-5..50)
    };
    SyscallReply {
        retval,
        out_len,
        out_ptr,
        errno,
    }
}

/// Hostile replies to a pending read never reach the container out of bounds.
fn iago() -> Outcome {
    let t = Instant::now();
    let (base, realm) = pending_read_world(SEED, &Mutations::none()).expect("pending read");
    let d = base.descriptor(realm).expect("realm");
    let buf = d.window_base().0 + layout::BUFFER;
    let cap = layout::BUFFER_SIZE;
    let heap = d.private[(layout::HEAP as usize) / GRANULE_SIZE];
    let mut rng = ChaCha8Rng::seed_from_u64(SEED ^ 0x1a90);
    let (mut delivered, mut bad) = (0, 0);
    for _ in 0..10_000 {
        let reply = hostile_reply(&mut rng, buf, cap);
        let mut w = base.clone();
        if w.reenter_container(realm, reply).is_ok() {
            delivered += 1;
            // Nothing past the reply length may have landed in private memory.
            let page = w.granules().get(heap).expect("heap").contents();
            let n = reply.out_len.min(IAGO_REQUEST) as usize;
            let spill = page[n..IAGO_REQUEST as usize + 64].iter().any(|&b| b != 0);
            if !oracle_accepts(&reply, buf, cap) || spill {
                bad += 1;
            }
        }
    }
    let el = t.elapsed();
    outcome(
        bad == 0 && delivered > 0 && within(el, 30),
        format!("10000 replies, {delivered} delivered, {bad} out of bounds, {el:.2?}"),
    )
}

/// No shielded plaintext in host stores; every tamper kind is caught.
fn shielded() -> Outcome {
    const WINDOW: usize = 16;
    let mut leaks = 0;
    let mut scanned = 0;
    for sc in scenario::corpus() {
        let exec = execute(&sc, sc.seed, &Mutations::none(), Vec::new()).expect("corpus run");
        let mut needles: HashSet<&[u8]> = HashSet::new();
        let plaintexts: Vec<Vec<u8>> = exec
            .world
            .system()
            .map(|s| s.shielded_plaintext().iter().map(|p| p.to_vec()).collect())
            .unwrap_or_default();
        for p in &plaintexts {
            for w in p.windows(WINDOW) {
                if w.iter().collect::<BTreeSet<_>>().len() >= 4 {
                    needles.insert(w);
                }
            }
        }
        for store in exec.world.host().host_stores() {
            scanned += store.len();
            leaks += store
                .windows(WINDOW)
                .filter(|w| needles.contains(w))
                .count();
        }
    }
    let cat = tamper_catalog(SEED, 20, &Mutations::none()).expect("tamper catalog");
    outcome(
        leaks == 0 && cat.per_kind.len() == TamperKind::ALL.len() && cat.passed(),
        format!(
            "{scanned} host bytes scanned, {leaks} plaintext windows; tamper {}/{} detected over {} kinds",
            cat.detected,
            cat.cases,
            cat.per_kind.len()
        ),
    )
}

/// Full maintenance is clean; removing any one site is noticed.
fn coherence() -> Outcome {
    let m = coherence_matrix(SEED, &Mutations::none()).expect("coherence");
    let quiet: Vec<_> = m.per_site.iter().filter(|(_, &v)| v == 0).collect();
    outcome(
        m.baseline == 0 && m.per_site.len() == MaintenanceSite::ALL.len() && quiet.is_empty(),
        format!(
            "baseline {} violations; {} sites each caught (min {})",
            m.baseline,
            m.per_site.len(),
            m.per_site.values().min().copied().unwrap_or(0)
        ),
    )
}

/// k forwarded syscalls cost exactly 4k domain switches.
fn switches() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for k in [1usize, 10, 100] {
        let exec = execute(
            &scenario::getpid_loop(k),
            SEED,
            &Mutations::none(),
            Vec::new(),
        )
        .expect("run");
        let n = exec
            .world
            .trace()
            .records()
            .iter()
            .filter(|r| matches!(r.event, Event::Switch { .. }))
            .count();
        ok &= n == 4 * k && exec.containers[0].exit == Some(0);
        parts.push(format!("k={k}: {n}"));
    }
    outcome(ok, parts.join(", "))
}

/// Per-container lifecycle costs do not depend on how many containers run.
fn flat_lifecycle() -> Outcome {
    let t = Instant::now();
    let mut samples: Vec<Vec<f64>> = Vec::new();
    let mut ok = true;
    for n in [1usize, 2, 4, 8, 16] {
        let rep = run_lifecycle(n, SEED, &Mutations::none()).expect("lifecycle");
        ok &= rep.findings.is_empty() && rep.per_container.len() == n;
        for c in &rep.per_container {
            samples.push(c.values().map(|&v| v as f64).collect());
        }
    }
    let ops = samples[0].len();
    let mut worst: f64 = 0.0;
    for i in 0..ops {
        let xs: Vec<f64> = samples.iter().map(|s| s[i]).collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let sd = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt();
        worst = worst.max(if mean > 0.0 { sd / mean } else { 0.0 });
    }
    let el = t.elapsed();
    outcome(
        ok && ops == 6 && worst == 0.0 && within(el, 60),
        format!(
            "{} containers sampled over 6 ops, max cv {worst}, {el:.2?}",
            samples.len()
        ),
    )
}

/// Seeded adversaries never produce silent corruption or a leak.
fn adversary() -> Outcome {
    let r = adversary_differential(SEED, 1000, &Mutations::none()).expect("adversary");
    let total: usize = r.outcomes.values().sum();
    let bad = r.outcomes[&ActionOutcome::SilentCorruption.to_string()]
        + r.outcomes[&ActionOutcome::PlaintextLeak.to_string()];
    outcome(
        bad == 0 && total == r.actions && r.forbidden.is_empty(),
        format!(
            "{} scripts, {} actions: {}",
            r.scripts,
            r.actions,
            r.outcomes
                .iter()
                .map(|(k, v)| format!("{k}={v}"))
                .collect::<Vec<_>>()
                .join(" ")
        ),
    )
}

/// Same scenario and seed, same trace bytes.
fn determinism() -> Outcome {
    let mut same = 0;
    let mut total = 0;
    for sc in scenario::corpus() {
        for seed in [sc.seed, SEED] {
            let a = execute(&sc, seed, &Mutations::none(), sc.adversary.clone()).expect("run");
            let b = execute(&sc, seed, &Mutations::none(), sc.adversary.clone()).expect("run");
            total += 1;
            if a.world.trace().render().as_bytes() == b.world.trace().render().as_bytes() {
                same += 1;
            }
        }
    }
    outcome(
        same == total,
        format!("{same}/{total} trace pairs byte-identical"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 10] = [
        ("host sweep faults on every realm granule", ownership),
        ("clone equivalence and revoke completeness", clone_revoke),
        ("no sentinel survives container teardown", temporal),
        ("no out-of-bounds reply is delivered", iago),
        (
            "shielded stores leak nothing and detect tampering",
            shielded,
        ),
        (
            "every maintenance site is sufficient and necessary",
            coherence,
        ),
        ("k syscalls cost 4k switches", switches),
        ("lifecycle cost is flat in container count", flat_lifecycle),
        ("adversaries cause no silent corruption or leak", adversary),
        ("identical runs give identical traces", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let o = f();
        println!(
            "criterion {:>2} {} {name}: {}",
            i + 1,
            if o.passed { "PASS" } else { "FAIL" },
            o.detail
        );
        if !o.passed {
            failed += 1;
        }
    }
    println!(
        "acceptance: {}/{} passed",
        criteria.len() - failed,
        criteria.len()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
