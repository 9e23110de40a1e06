//! A backend that dies mid-run must abort per-problem, not fail the run.

use std::io::{Read, Write};
use std::net::TcpListener;

use prefgen_core::backend::{BackendConfig, Role};
use prefgen_core::config::{Backends, PipelineConfig};
use prefgen_core::pipeline::{load_journal, run, ProblemStatus, JOURNAL_FILE};

// Minimal server: answers every request with HTTP 500.
fn start_failing_server() -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}", listener.local_addr().unwrap());
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            std::thread::spawn(move || {
                let mut buf = [0u8; 4096];
                let _ = stream.read(&mut buf);
                let body = "{\"error\":\"down\"}";
                let _ = stream.write_all(
                    format!(
                        "HTTP/1.1 500 X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                        body.len()
                    )
                    .as_bytes(),
                );
            });
        }
    });
    addr
}

#[test]
fn failing_backend_journals_aborts_and_run_succeeds() {
    let endpoint = start_failing_server();
    let backend = |role| BackendConfig {
        endpoint: endpoint.clone(),
        max_retries: 0,
        request_timeout_ms: 5_000,
        ..BackendConfig::mock(role)
    };
    let mut cfg = PipelineConfig {
        concurrency: 2,
        backends: Backends {
            policy: backend(Role::Policy),
            small_policy: backend(Role::SmallPolicy),
            prm: backend(Role::Prm),
            orm: backend(Role::Orm),
        },
        ..Default::default()
    };
    cfg.normalize();

    let dir = tempfile::tempdir().unwrap();
    let problems = dir.path().join("problems.jsonl");
    cfg.mock.write_corpus(&problems).unwrap();
    // Keep it small; every problem will burn one failed request.
    let text = std::fs::read_to_string(&problems).unwrap();
    let three: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
    std::fs::write(&problems, three).unwrap();

    let out = dir.path().join("out");
    let stats = run(&cfg, &problems, &out, false).expect("aborted problems do not fail the run");
    assert_eq!(stats.aborted, 3);
    assert_eq!(stats.total_pairs, 0);
    assert_eq!(stats.total_questions, 3);

    let records = load_journal(&out.join(JOURNAL_FILE)).unwrap();
    assert_eq!(records.len(), 3);
    for record in records {
        assert_eq!(record.status, ProblemStatus::Aborted);
        assert!(record.route.is_none());
        assert!(record.error.is_some());
        assert!(record.pairs.is_empty());
    }
}
