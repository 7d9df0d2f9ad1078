mod common;

use std::io::BufReader;
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use amaq::autodiff::Tensor;
use amaq::harness::{ClientEndpoint, ServerEndpoint};
use amaq::quant::{Granularity, QuantAxis, QuantPacket, UnitLayout};
use amaq::wire::{
    decode_payload, pack, pack_raw, payload_size, predicted_size, predicted_size_raw, read_frame, run_client,
    run_server, unpack, write_frame, ErrorBody, Frame, Hello, PackedMeta, Role, Tag, Unpacked, FRAME_OVERHEAD,
    PROTOCOL_VERSION,
};
use amaq::Error;
use proptest::prelude::*;

fn packet_strategy() -> impl Strategy<Value = QuantPacket> {
    let layout = (1usize..4, 1usize..6, 1usize..7, 0u8..4, 1usize..8).prop_map(|(outer, rows, cols, kind, gs)| {
        let shape = vec![outer, rows, cols];
        let (g, axis) = match kind {
            0 => (Granularity::Tensor, QuantAxis::Channel),
            1 => (Granularity::Channel, QuantAxis::Channel),
            2 => (Granularity::Group(gs), QuantAxis::Channel),
            _ => (Granularity::Channel, QuantAxis::Token),
        };
        (shape.clone(), UnitLayout::new(&shape, g, axis).unwrap())
    });
    layout.prop_flat_map(|(shape, layout)| {
        let numel: usize = shape.iter().product();
        let units = layout.units;
        (
            prop::collection::vec(1u8..=16, units),
            prop::collection::vec(-1e3f32..1e3, units),
            prop::collection::vec(1e-4f32..10.0, units),
            prop::collection::vec(any::<u32>(), numel),
        )
            .prop_map(move |(wire_bits, zmin, delta, raw)| {
                let indices = raw
                    .iter()
                    .enumerate()
                    .map(|(i, &r)| r & ((1u32 << wire_bits[layout.unit_of(i)]) - 1))
                    .collect();
                QuantPacket {
                    shape: shape.clone(),
                    layout,
                    wire_bits,
                    zmin,
                    delta,
                    indices,
                }
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn pack_unpack_is_identity(p in packet_strategy(), id in 0u32..(1 << 30), step in any::<u32>(), bwd in any::<bool>()) {
        let role = if bwd { Role::BwdGrad } else { Role::FwdAct };
        let meta = PackedMeta { tensor_id: id, step, role };
        let bytes = pack(&p, meta).unwrap();
        prop_assert_eq!(bytes.len(), predicted_size(&p.shape, &p.layout, &p.wire_bits));
        let (u, m) = unpack(&bytes).unwrap();
        prop_assert_eq!(m, meta);
        prop_assert_eq!(u, Unpacked::Quantized(p));
    }
}

proptest! {
    #[test]
    fn raw_round_trip(data in prop::collection::vec(any::<f32>().prop_filter("finite", |v| v.is_finite()), 1..64)) {
        let t = Tensor::from_vec(data);
        let meta = PackedMeta { tensor_id: 7, step: 1, role: Role::LoraWeights };
        let bytes = pack_raw(&t, meta).unwrap();
        prop_assert_eq!(bytes.len(), predicted_size_raw(t.shape()));
        prop_assert_eq!(unpack(&bytes).unwrap(), (Unpacked::Raw(t), meta));
    }
}

const GOLDEN: &[u8] = include_bytes!("../fixtures/golden.wire");

#[test]
fn golden_fixture_decodes_and_reencodes() {
    let (u, meta) = unpack(GOLDEN).unwrap();
    assert_eq!(
        meta,
        PackedMeta {
            tensor_id: 3,
            step: 42,
            role: Role::FwdAct
        }
    );
    let Unpacked::Quantized(p) = u else {
        panic!("expected a quantized tensor")
    };
    assert_eq!(p.shape, [3, 3]);
    assert_eq!(
        p.layout,
        UnitLayout::new(&[3, 3], Granularity::Channel, QuantAxis::Channel).unwrap()
    );
    assert_eq!(p.wire_bits, [1, 5, 11]);
    assert_eq!(p.zmin, [-1.0, 0.0, 0.25]);
    assert_eq!(p.delta, [2.0, 0.5, 0.125]);
    assert_eq!(p.indices, [1, 31, 2047, 0, 4, 1, 1, 17, 1024]);
    assert_eq!(
        p.dequantize().data(),
        &[1.0, 15.5, 256.125, -1.0, 2.0, 0.375, 1.0, 8.5, 128.25]
    );
    assert_eq!(pack(&p, meta).unwrap(), GOLDEN);
}

#[test]
fn corrupted_bytes_are_rejected() {
    for i in 0..GOLDEN.len() {
        let mut b = GOLDEN.to_vec();
        b[i] ^= 0x10;
        assert!(unpack(&b).is_err(), "flip at byte {i} went unnoticed");
    }
    let mut b = GOLDEN.to_vec();
    b[40] ^= 1;
    assert!(matches!(unpack(&b), Err(Error::Integrity(_))));
    assert!(matches!(unpack(&GOLDEN[..GOLDEN.len() - 1]), Err(Error::Framing(_))));
}

#[test]
fn frame_bytes_are_body_plus_overhead() {
    let body = GOLDEN.to_vec();
    let mut buf = Vec::new();
    let n = write_frame(&mut buf, &Frame::new(Tag::FwdAct, body.clone())).unwrap();
    assert_eq!(n, body.len() + FRAME_OVERHEAD);
    assert_eq!(buf.len(), n);
    let f = read_frame(&mut buf.as_slice()).unwrap();
    assert_eq!((f.tag, f.body), (Tag::FwdAct, body));
}

/// Every tensor an endpoint emits has exactly its predicted size, and the
/// step record counts those bytes.
#[test]
fn step_bytes_match_predicted_sizes() {
    let cfg = common::tiny_with_quant(common::AMAQ, &[]);
    let mut client = ClientEndpoint::new(&cfg).unwrap();
    let mut server = ServerEndpoint::new(&cfg).unwrap();
    let predicted = |b: &[u8]| payload_size(&decode_payload(b).unwrap().0);
    for step in 0..5 {
        let a = client.begin_step(step).unwrap();
        let b = server.on_forward(&a).unwrap();
        let c = client.on_forward(&b).unwrap();
        let (d, report) = server.on_backward(&c).unwrap();
        for bytes in [&a, &b, &c, &d] {
            assert_eq!(bytes.len(), predicted(bytes));
        }
        let m = client.finish_step(&d, &report).unwrap();
        assert_eq!(m.bytes_tx, a.len() + c.len());
        assert_eq!(m.bytes_rx, b.len() + d.len());
    }
}

fn with_watchdog<T: Send + 'static>(secs: u64, f: impl FnOnce() -> T + Send + 'static) -> T {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        let _ = tx.send(f());
    });
    rx.recv_timeout(Duration::from_secs(secs)).expect("session stalled")
}

#[test]
fn thousand_step_loopback_session() {
    let cfg = common::tiny_with_quant(common::AMAQ, &["optim.steps=1000", "eval_every=250"]);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server_cfg = cfg.clone();
    let server = thread::spawn(move || run_server(&listener, &server_cfg, None).map(|s| s.trainable().len()));
    let (steps, evals, synced, finite) = with_watchdog(300, move || {
        let s = run_client(addr, &cfg, None, None).unwrap();
        let finite = s.metrics.iter().all(|m| m.task_loss.is_finite());
        (
            s.metrics.len(),
            s.evals.iter().map(|e| e.0).collect::<Vec<_>>(),
            s.synced.len(),
            finite,
        )
    });
    assert_eq!(steps, 1000);
    assert_eq!(evals, [250, 500, 750, 1000]);
    assert_eq!(synced, server.join().unwrap().unwrap());
    assert!(finite);
}

#[test]
fn wrong_protocol_version_gets_error_frame() {
    let cfg = common::tiny_with_quant(r#"{"mode":"none"}"#, &[]);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server_cfg = cfg.clone();
    let server = thread::spawn(move || run_server(&listener, &server_cfg, None).err());

    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(30))).unwrap();
    let mut hello = Hello::for_config(&cfg);
    hello.version = PROTOCOL_VERSION + 1;
    write_frame(
        &mut stream,
        &Frame::new(Tag::Hello, serde_json::to_vec(&hello).unwrap()),
    )
    .unwrap();
    let reply = read_frame(&mut BufReader::new(&stream)).unwrap();
    assert_eq!(reply.tag, Tag::Error);
    let body: ErrorBody = serde_json::from_slice(&reply.body).unwrap();
    assert!(body.message.contains("protocol version"), "{}", body.message);
    assert!(matches!(server.join().unwrap(), Some(Error::Protocol(_))));
}

#[test]
fn config_mismatch_is_refused_on_both_sides() {
    let cfg = common::tiny_with_quant(r#"{"mode":"none"}"#, &[]);
    let other = common::tiny_with_quant(r#"{"mode":"none"}"#, &["optim.model_lr=0.01"]);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let server = thread::spawn(move || run_server(&listener, &cfg, None).err());
    let client_err = run_client(addr, &other, None, None).err().expect("client must fail");
    match client_err {
        Error::Protocol(m) => assert!(m.contains("config digest"), "{m}"),
        e => panic!("unexpected error {e}"),
    }
    assert!(matches!(server.join().unwrap(), Some(Error::Protocol(_))));
}
