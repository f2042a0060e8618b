//! Offline runs must not touch the network. A listener stands in for the endpoint and
//! counts every connection it receives.

use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use tsagent::config::{AnchorSource, RunConfig, SyntheticConfig};
use tsagent::data::Task;
use tsagent::reasoner::visual::vlm::{http_attempts, ENDPOINT_ENV};
use tsagent::run::{execute, Command};

#[test]
fn offline_runs_make_no_connections() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for _ in listener.incoming() {
            counter.fetch_add(1, Ordering::SeqCst);
        }
    });
    std::env::set_var(ENDPOINT_ENV, format!("http://{addr}/v1/chat/completions"));
    let tmp = tempfile::tempdir().unwrap();
    for task in Task::ALL {
        let mut cfg = RunConfig { task, output_dir: tmp.path().join(task.name()), ..RunConfig::default() };
        cfg.anchors.source = AnchorSource::Offline;
        cfg.data.synthetic = Some(SyntheticConfig { rows: 240, samples: 24, ..SyntheticConfig::default() });
        cfg.data.seq_len = 32;
        cfg.data.pred_len = 16;
        cfg.data.eval_stride = Some(16);
        let m = &mut cfg.model;
        (m.d_model, m.d_memory, m.hidden_dim, m.d_ff, m.n_heads, m.e_layers) = (8, 8, 8, 8, 2, 1);
        (m.patch_len, m.stride, m.moving_avg, m.router_hidden, m.vae_hidden, m.vae_latent) = (8, 4, 5, 8, 8, 4);
        execute(&cfg, Command::Run, &[]).unwrap();
    }
    assert_eq!(http_attempts(), 0);
    assert_eq!(hits.load(Ordering::SeqCst), 0);
}
