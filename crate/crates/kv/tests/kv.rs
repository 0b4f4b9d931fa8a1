use std::collections::{HashMap, HashSet};
use std::io::{Read, Write};
use std::net::TcpStream;
use std::sync::atomic::Ordering;
use std::time::Duration;

use trust_bench::zipf::Sampler;
use trust_bench::Distribution;
use trust_core::{Runtime, RuntimeConfig};
use trust_kv::client::{initial_id, key_bytes, key_stream, value_bytes, value_id};
use trust_kv::verify::{self, Event, Kind};
use trust_kv::wire::{Op, Status};
use trust_kv::{load_client, prefill, Client, LoadConfig, Server, ServerConfig, ServerMode, Table};

const MODES: [ServerMode; 2] = [ServerMode::Trust, ServerMode::Locks];

fn server(mode: ServerMode) -> Server {
    Server::start(&ServerConfig::new(mode, 2, 2)).unwrap()
}

#[test]
fn put_then_get_and_miss() {
    for mode in MODES {
        let s = server(mode);
        let mut c = Client::connect(s.local_addr()).unwrap();
        let v = value_bytes(42);
        c.put(&key_bytes(1), &v).unwrap();
        assert_eq!(c.get(&key_bytes(1)).unwrap(), Some(v.to_vec()), "{mode:?}");
        assert_eq!(c.get(&key_bytes(2)).unwrap(), None, "{mode:?}");
        s.shutdown().unwrap();
    }
}

#[test]
fn overwrite_returns_latest() {
    for mode in MODES {
        let s = server(mode);
        let mut c = Client::connect(s.local_addr()).unwrap();
        for id in 0..20 {
            c.put(b"k", &value_bytes(id)).unwrap();
            assert_eq!(c.get(b"k").unwrap().as_deref().and_then(value_id), Some(id));
        }
        s.shutdown().unwrap();
    }
}

#[test]
fn pipelined_responses_match_by_id() {
    for mode in MODES {
        let s = server(mode);
        let mut c = Client::connect(s.local_addr()).unwrap();
        for k in 0..64u64 {
            c.put(&key_bytes(k), &value_bytes(1000 + k)).unwrap();
        }
        // One burst of GETs across every shard; whatever the arrival order,
        // each response must pair with exactly one request.
        let mut want = HashMap::new();
        for round in 0..4 {
            for k in 0..64u64 {
                let key = (k * 7 + round) % 64;
                want.insert(c.send(Op::Get { key: key_bytes(key).to_vec() }), 1000 + key);
            }
        }
        c.flush().unwrap();
        let mut seen = HashSet::new();
        while seen.len() < want.len() {
            for r in c.receive().unwrap() {
                let expect = want.get(&r.id).unwrap_or_else(|| panic!("unknown id {}", r.id));
                assert!(seen.insert(r.id), "duplicate response {}", r.id);
                match r.status {
                    Status::Ok(v) => assert_eq!(value_id(&v), Some(*expect)),
                    Status::Miss => panic!("miss for {}", r.id),
                }
            }
        }
        assert_eq!(seen.len(), 256);
        s.shutdown().unwrap();
    }
}

#[test]
fn two_clients_interleaving_on_one_key() {
    for mode in MODES {
        let s = server(mode);
        let addr = s.local_addr();
        let handles: Vec<_> = (0..2u64)
            .map(|t| {
                std::thread::spawn(move || {
                    let mut c = Client::connect(addr).unwrap();
                    let mut history = Vec::new();
                    let epoch = std::time::UNIX_EPOCH;
                    let now = || epoch.elapsed().unwrap().as_nanos() as u64;
                    for i in 0..300u64 {
                        let id = (t + 1) << 40 | i;
                        let invoke = now();
                        if i % 3 == 0 {
                            c.put(b"shared", &value_bytes(id)).unwrap();
                            history.push(Event {
                                key: 0,
                                kind: Kind::Put,
                                value: Some(id),
                                invoke,
                                respond: now(),
                            });
                        } else {
                            let v = c.get(b"shared").unwrap().map(|v| value_id(&v).unwrap());
                            history.push(Event {
                                key: 0,
                                kind: Kind::Get,
                                value: v,
                                invoke,
                                respond: now(),
                            });
                        }
                    }
                    history
                })
            })
            .collect();
        let history: Vec<Event> = handles.into_iter().flat_map(|h| h.join().unwrap()).collect();
        let summary = verify::check(&history, |_| None).unwrap();
        assert_eq!(summary.writes, 200);
        let last = Client::connect(addr).unwrap().get(b"shared").unwrap().map(|v| value_id(&v).unwrap());
        let last = last.unwrap();
        assert!(last >> 40 == 1 || last >> 40 == 2, "final value {last:#x} from neither client");
        s.shutdown().unwrap();
    }
}

#[test]
fn malformed_frame_closes_only_that_connection() {
    for mode in MODES {
        let s = server(mode);
        let mut bad = TcpStream::connect(s.local_addr()).unwrap();
        bad.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
        let mut frame = 9u64.to_le_bytes().to_vec();
        frame.push(7);
        bad.write_all(&frame).unwrap();
        let mut buf = [0u8; 16];
        let n = bad.read(&mut buf).unwrap_or(0);
        assert_eq!(n, 0, "{mode:?}: connection should be closed");
        assert_eq!(s.stats().protocol_errors.load(Ordering::Relaxed), 1);

        let mut good = Client::connect(s.local_addr()).unwrap();
        good.put(b"alive", b"yes").unwrap();
        assert_eq!(good.get(b"alive").unwrap().as_deref(), Some(&b"yes"[..]));
        s.shutdown().unwrap();
    }
}

#[test]
fn returned_values_are_copies() {
    // Over the network.
    let s = server(ServerMode::Trust);
    let mut c = Client::connect(s.local_addr()).unwrap();
    c.put(b"k", &value_bytes(5)).unwrap();
    let mut got = c.get(b"k").unwrap().unwrap();
    got.iter_mut().for_each(|b| *b = !*b);
    assert_eq!(c.get(b"k").unwrap().unwrap(), value_bytes(5));
    s.shutdown().unwrap();

    // Directly against an entrusted table.
    let rt = Runtime::start(RuntimeConfig::new(2)).unwrap();
    rt.block_on(|| {
        let t = trust_core::trustee_at(1).unwrap().entrust(Table::new());
        t.apply(|t| t.insert(b"k".to_vec(), b"orig".to_vec()));
        let mut copy = t.apply_with(|t, k: Vec<u8>| t.get(&k).cloned(), b"k".to_vec()).unwrap().unwrap();
        copy[0] = b'X';
        assert_eq!(t.apply(|t| t[&b"k"[..]].clone()), b"orig");
    });
    rt.shutdown().unwrap();
}

#[test]
fn depth_one_is_strictly_serial() {
    for mode in MODES {
        let s = server(mode);
        let mut c = Client::connect(s.local_addr()).unwrap();
        for i in 0..200u64 {
            // `call` fails unless exactly one response, for this request,
            // arrives before the next request is sent.
            c.put(&key_bytes(i % 10), &value_bytes(i)).unwrap();
            assert_eq!(c.get(&key_bytes(i % 10)).unwrap().as_deref().and_then(value_id), Some(i));
        }
        let mut cfg = LoadConfig::new(s.local_addr(), 1, 1, 10);
        cfg.duration = Duration::from_millis(200);
        cfg.verify = true;
        prefill(s.local_addr(), 10, 1).unwrap();
        let r = load_client(&cfg).unwrap();
        assert!(r.stats.total_ops() > 0);
        assert!(r.verified.is_some());
        s.shutdown().unwrap();
    }
}

#[test]
fn verified_load_with_five_percent_writes() {
    for mode in MODES {
        let s = server(mode);
        prefill(s.local_addr(), 1000, 32).unwrap();
        let mut cfg = LoadConfig::new(s.local_addr(), 4, 16, 1000);
        cfg.duration = Duration::from_millis(500);
        cfg.verify = true;
        let r = load_client(&cfg).unwrap();
        let v = r.verified.expect("verification ran");
        assert_eq!((v.reads + v.writes) as u64, r.stats.total_ops());
        assert_eq!(r.misses, 0, "{mode:?}: prefilled keys never miss");
        assert!(r.puts > 0 && r.gets > r.puts, "{mode:?}: {} puts, {} gets", r.puts, r.gets);
        assert_eq!(s.stats().requests.load(Ordering::Relaxed), 1000 + r.stats.total_ops());
        s.shutdown().unwrap();
    }
}

#[test]
fn prefill_sets_initial_values() {
    let s = server(ServerMode::Trust);
    prefill(s.local_addr(), 100, 8).unwrap();
    let mut c = Client::connect(s.local_addr()).unwrap();
    for k in [0u32, 1, 50, 99] {
        let v = c.get(&key_bytes(k as u64)).unwrap().unwrap();
        assert_eq!(value_id(&v), Some(initial_id(k)));
    }
    assert_eq!(c.get(&key_bytes(100)).unwrap(), None);
    s.shutdown().unwrap();
}

#[test]
fn zipf_top_key_share_matches_first_rank_probability() {
    let n = 10_000_000u64;
    // Harmonic number summed smallest-first for accuracy.
    let h: f64 = (1..=n).rev().map(|r| 1.0 / r as f64).sum();
    let p1 = 1.0 / h;
    let cfg = LoadConfig {
        distribution: Distribution::Zipf { alpha: 1.0 },
        ..LoadConfig::new("127.0.0.1:1".parse().unwrap(), 1, 1, n)
    };
    let sampler: Sampler = cfg.sampler().unwrap();
    let draws = 4_000_000;
    let hits = key_stream(&sampler, cfg.seed, 0).take(draws).filter(|&k| k == 0).count();
    let share = hits as f64 / draws as f64;
    assert!((share - p1).abs() <= 0.01 * p1, "share {share}, p1 {p1}");
}

#[test]
fn bad_load_config_is_a_usage_error() {
    let addr = "127.0.0.1:1".parse().unwrap();
    for cfg in [
        LoadConfig::new(addr, 0, 1, 10),
        LoadConfig::new(addr, 1, 0, 10),
        LoadConfig::new(addr, 1, 1, 0),
        LoadConfig { write_ratio: 1.5, ..LoadConfig::new(addr, 1, 1, 10) },
    ] {
        assert!(matches!(load_client(&cfg), Err(trust_kv::ClientError::Usage(_))));
    }
}

#[test]
fn cli_serve_and_bench() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("kv.csv");
    let mut serve = std::process::Command::new(env!("CARGO_BIN_EXE_kv"))
        .args(["serve", "--addr", "127.0.0.1:0", "--workers", "1", "--trustees", "1"])
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    let mut out = serve.stdout.take().unwrap();
    let mut byte = [0u8; 1];
    while out.read(&mut byte).unwrap() == 1 && byte[0] != b'\n' {
        line.push(byte[0] as char);
    }
    let addr = line.trim().strip_prefix("listening on ").expect("listen line").to_string();
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_kv"))
        .args(["bench", "--addr", &addr, "--threads", "2", "--pipeline", "8", "--keys", "100"])
        .args(["--dist", "zipf", "--alpha", "1", "--writes", "0.05", "--seconds", "0.3", "--verify"])
        .arg("--csv")
        .arg(&csv)
        .status()
        .unwrap();
    serve.kill().unwrap();
    serve.wait().unwrap();
    assert!(status.success());
    let text = std::fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(text.starts_with("experiment,threads,pipeline,keys,distribution"));

    let bad = std::process::Command::new(env!("CARGO_BIN_EXE_kv"))
        .args(["bench", "--addr", &addr, "--seconds", "0"])
        .output()
        .unwrap();
    assert_eq!(bad.status.code(), Some(2));
}
