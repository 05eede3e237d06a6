use std::time::Instant;

use nrtetl::cdc_log::{load_checkpoint, read_log, save_checkpoint, CdcLogWriter, CdcTailer, LogError, LogOffset};
use nrtetl_core::record::{ChangeRecord, Op};
use nrtetl_core::table::TableConfig;
use nrtetl_core::value::{row, Scalar};

fn tables(names: &[&str]) -> Vec<TableConfig> {
    names.iter().map(|t| TableConfig::master(t, "id", "")).collect()
}

fn rec(table: &str, id: i64) -> ChangeRecord {
    ChangeRecord::new(table, Op::Insert, id, row([("id", Scalar::from(id)), ("v", Scalar::from(id * 3))]))
}

fn tail_all(dir: &std::path::Path, ts: &[TableConfig], table: &str, from: LogOffset) -> (Vec<ChangeRecord>, LogOffset) {
    let mut t = CdcTailer::open(dir, ts, table, from).unwrap();
    let mut out = Vec::new();
    loop {
        let got = t.poll(1000).unwrap();
        if got.is_empty() {
            return (out, t.offset());
        }
        out.extend(got);
    }
}

#[test]
fn first_appends_are_numbered_from_one() {
    let d = tempfile::tempdir().unwrap();
    let ts = tables(&["production"]);
    let mut w = CdcLogWriter::open(d.path(), &ts, 100).unwrap();
    let p = ChangeRecord::new(
        "production",
        Op::Insert,
        1,
        row([("id", Scalar::from(1i64)), ("equip", Scalar::from("E1")), ("qty", Scalar::from(10i64))]),
    );
    assert_eq!(w.append(p).unwrap(), 1);
    assert_eq!(w.append(rec("production", 2)).unwrap(), 2);
}

#[test]
fn delete_without_row_key_is_rejected() {
    let d = tempfile::tempdir().unwrap();
    let ts = tables(&["a"]);
    let mut w = CdcLogWriter::open(d.path(), &ts, 100).unwrap();
    let del = ChangeRecord::new("a", Op::Delete, 1, row([("v", Scalar::from(1i64))]));
    assert!(matches!(w.append(del), Err(LogError::Invalid(_))));
    assert!(matches!(w.append(rec("zzz", 1)), Err(LogError::UnknownTable(_))));
    assert_eq!(w.last_seq(), 0);
}

#[test]
fn tail_filters_and_resumes() {
    let d = tempfile::tempdir().unwrap();
    let ts = tables(&["tabA", "tabB"]);
    let mut w = CdcLogWriter::open(d.path(), &ts, 100).unwrap();
    w.append_all([rec("tabA", 1), rec("tabB", 2), rec("tabA", 3)]).unwrap();
    w.flush().unwrap();
    let (a, _) = tail_all(d.path(), &ts, "tabA", LogOffset::default());
    assert_eq!(a.iter().map(|r| r.seq).collect::<Vec<_>>(), [1, 3]);
    let mut t = CdcTailer::open(d.path(), &ts, "tabA", LogOffset::default()).unwrap();
    assert_eq!(t.poll(1).unwrap().len(), 1);
    let (rest, _) = tail_all(d.path(), &ts, "tabA", t.offset());
    assert_eq!(rest.iter().map(|r| r.seq).collect::<Vec<_>>(), [3]);
    assert!(CdcTailer::open(d.path(), &ts, "nope", LogOffset::default()).is_err());
}

#[test]
fn tails_partition_the_log_and_replay_identically() {
    let d = tempfile::tempdir().unwrap();
    let names = ["a", "b", "c"];
    let ts = tables(&names);
    // Small segments so tails cross rotations.
    let mut w = CdcLogWriter::open(d.path(), &ts, 7).unwrap();
    for i in 0..100 {
        w.append(rec(names[(i * 7 % 3) as usize], i)).unwrap();
    }
    w.flush().unwrap();
    let all = read_log(d.path(), &ts).unwrap();
    assert_eq!(all.len(), 100);
    let mut union = Vec::new();
    for n in names {
        let (first, _) = tail_all(d.path(), &ts, n, LogOffset::default());
        let (again, _) = tail_all(d.path(), &ts, n, LogOffset::default());
        assert_eq!(first, again);
        assert!(first.iter().all(|r| r.table == n));
        assert!(first.windows(2).all(|p| p[0].seq < p[1].seq));
        union.extend(first);
    }
    union.sort_by_key(|r| r.seq);
    assert_eq!(union, all);
}

#[test]
fn checkpoint_restart_semantics() {
    let d = tempfile::tempdir().unwrap();
    let ts = tables(&["a"]);
    let mut w = CdcLogWriter::open(d.path().join("log"), &ts, 100).unwrap();
    for i in 1..=10 {
        w.append(rec("a", i)).unwrap();
    }
    w.flush().unwrap();
    let cp = d.path().join("cp");
    assert_eq!(load_checkpoint(&cp).unwrap(), None);

    let mut t = CdcTailer::open(d.path().join("log"), &ts, "a", LogOffset::default()).unwrap();
    let first = t.poll(5).unwrap();
    assert_eq!(first.last().unwrap().seq, 5);
    save_checkpoint(&cp, t.offset()).unwrap();
    drop(t);

    let from = load_checkpoint(&cp).unwrap().unwrap();
    assert_eq!(from.seq, 5);
    let (rest, _) = tail_all(&d.path().join("log"), &ts, "a", from);
    assert_eq!(rest.first().unwrap().seq, 6);
    assert_eq!(rest.len(), 5);

    // Without a checkpoint a restart begins at the start.
    let (all, _) = tail_all(&d.path().join("log"), &ts, "a", LogOffset::default());
    assert_eq!(all.len(), 10);
}

#[test]
fn writer_continues_after_reopen() {
    let d = tempfile::tempdir().unwrap();
    let ts = tables(&["a"]);
    {
        let mut w = CdcLogWriter::open(d.path(), &ts, 3).unwrap();
        for i in 0..5 {
            w.append(rec("a", i)).unwrap();
        }
        w.flush().unwrap();
    }
    let mut w = CdcLogWriter::open(d.path(), &ts, 3).unwrap();
    assert_eq!(w.last_seq(), 5);
    assert_eq!(w.append(rec("a", 9)).unwrap(), 6);
}

fn time_tail(dir: &std::path::Path, ts: &[TableConfig], table: &str) -> (usize, f64) {
    let t0 = Instant::now();
    let (got, _) = tail_all(dir, ts, table, LogOffset::default());
    (got.len(), t0.elapsed().as_secs_f64())
}

#[test]
fn shared_log_tailing_is_slower_than_single_table() {
    const PER_TABLE: i64 = 20_000;
    let names: Vec<String> = (0..16).map(|i| format!("t{i:02}")).collect();
    let refs: Vec<&str> = names.iter().map(String::as_str).collect();
    let shared = tempfile::tempdir().unwrap();
    let single = tempfile::tempdir().unwrap();
    let ts = tables(&refs);
    let mut w = CdcLogWriter::open(shared.path(), &ts, 100_000).unwrap();
    for i in 0..PER_TABLE {
        for n in &refs {
            w.append(rec(n, i)).unwrap();
        }
    }
    w.flush().unwrap();
    let mut w = CdcLogWriter::open(single.path(), &ts, 100_000).unwrap();
    w.append_all((0..PER_TABLE).map(|i| rec("t00", i))).unwrap();
    w.flush().unwrap();

    let (n_shared, t_shared) = time_tail(shared.path(), &ts, "t00");
    let (n_single, t_single) = time_tail(single.path(), &ts, "t00");
    assert_eq!(n_shared, PER_TABLE as usize);
    assert_eq!(n_single, PER_TABLE as usize);
    let (rate_shared, rate_single) = (n_shared as f64 / t_shared, n_single as f64 / t_single);
    assert!(rate_shared < rate_single, "shared {rate_shared:.0}/s, single {rate_single:.0}/s");
}
