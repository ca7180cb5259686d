use std::io::BufWriter;
use std::os::unix::net::UnixStream;
use std::path::PathBuf;
use std::thread;

use casc_core::backends::conformance::{self, Mode, Transcript};
use casc_core::backends::protocol::{handle_body, serve};
use casc_core::backends::{
    AnalyticBackend, Backend, BackendKind, Capability, ErrorCode, ExternalBackend, LabeledImage,
    ModelBlob, SegmenterSample,
};
use casc_core::grid::Grid2;
use casc_core::prompting::build_prompts;
use casc_core::synth::{self, SynthConfig};
use casc_core::volume::{extract_mask_slices, extract_slices, normalize_brain};

fn golden_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden.transcript")
}

fn golden_file() -> Transcript {
    let mut f = std::fs::File::open(golden_path()).expect("golden transcript present");
    Transcript::read_from(&mut f).expect("golden transcript parses")
}

/// `n` socket connections, each served by its own analytic server thread.
fn socket_backend(n: usize) -> (ExternalBackend, Vec<thread::JoinHandle<()>>) {
    let mut streams = Vec::new();
    let mut servers = Vec::new();
    for _ in 0..n {
        let (client, server) = UnixStream::pair().unwrap();
        servers.push(thread::spawn(move || {
            let reader = server.try_clone().unwrap();
            serve(&AnalyticBackend::default(), reader, BufWriter::new(server)).unwrap();
        }));
        let reader = client.try_clone().unwrap();
        streams.push((
            Box::new(reader) as Box<dyn std::io::Read + Send>,
            Box::new(client) as Box<dyn std::io::Write + Send>,
        ));
    }
    (ExternalBackend::from_streams(streams).unwrap(), servers)
}

#[test]
fn checked_in_transcript_matches_a_fresh_recording() {
    assert_eq!(golden_file(), conformance::golden_transcript());
}

#[test]
fn analytic_backend_replays_golden_transcript_strictly() {
    let t = golden_file();
    let backend = AnalyticBackend::default();
    let report = conformance::replay(&t, Mode::Strict, |body| Ok(handle_body(&backend, body)));
    assert!(report.passed(), "{:?}", report.mismatches);
    assert_eq!(report.total, t.exchanges.len());
}

#[test]
fn socket_server_replays_golden_transcript_strictly() {
    let (ext, servers) = socket_backend(1);
    let report = conformance::replay(&golden_file(), Mode::Strict, |body| ext.exchange_raw(body));
    assert!(report.passed(), "{:?}", report.mismatches);
    drop(ext);
    for s in servers {
        s.join().unwrap();
    }
}

#[test]
fn tampered_response_is_reported() {
    let mut t = golden_file();
    let last = t.exchanges.len() - 1;
    t.exchanges[last].1.push(b' ');
    let backend = AnalyticBackend::default();
    let report = conformance::replay(&t, Mode::Strict, |body| Ok(handle_body(&backend, body)));
    assert_eq!(report.mismatches.len(), 1);
    assert_eq!(report.mismatches[0].index, last);
}

#[test]
fn external_backend_agrees_with_in_process_one() {
    let local = AnalyticBackend::default();
    let (ext, servers) = socket_backend(2);
    let d = ext.descriptor();
    assert_eq!(d.kind, BackendKind::External);
    assert_eq!(d.capabilities, local.descriptor().capabilities);
    assert!(d.supports(Capability::GradientMaps));

    let cfg = SynthConfig { count: 2, size: 24, tumor_radius: (3.0, 5.0), ..Default::default() };
    let cases = synth::generate(&cfg);
    let volume = normalize_brain(&cases[0].volume);
    let slices = extract_slices(&volume);
    let masks = extract_mask_slices(&cases[0].gt);
    let k = (0..masks.len()).max_by_key(|&k| masks[k].count()).unwrap();
    let image = &slices[k];

    assert_eq!(ext.embed_image(image).unwrap(), local.embed_image(image).unwrap());
    assert_eq!(ext.embed_text("a brain tumor").unwrap(), local.embed_text("a brain tumor").unwrap());

    let samples = vec![
        LabeledImage { image: image.clone(), label: 1 },
        LabeledImage { image: slices[0].clone(), label: 0 },
    ];
    let model = ext.train_classifier(&samples).unwrap();
    assert_eq!(model, local.train_classifier(&samples).unwrap());
    assert_eq!(
        ext.classify_with_maps(&model, image).unwrap(),
        local.classify_with_maps(&model, image).unwrap()
    );

    let prompts = build_prompts(&masks[k]).unwrap();
    assert_eq!(
        ext.segment_prompted(image, &prompts).unwrap(),
        local.segment_prompted(image, &prompts).unwrap()
    );

    let pool: Vec<SegmenterSample> = cases
        .iter()
        .map(|c| SegmenterSample { volume: normalize_brain(&c.volume), label: c.gt.clone() })
        .collect();
    let seg = ext.train_segmenter(&pool).unwrap();
    assert_eq!(seg, local.train_segmenter(&pool).unwrap());

    // both connections in use at once
    thread::scope(|s| {
        let handles: Vec<_> = pool
            .iter()
            .map(|p| {
                let (ext, seg) = (&ext, &seg);
                s.spawn(move || ext.predict_volume(seg, &p.volume).unwrap())
            })
            .collect();
        for (h, p) in handles.into_iter().zip(&pool) {
            assert_eq!(h.join().unwrap(), local.predict_volume(&seg, &p.volume).unwrap());
        }
    });

    let err = ext.predict_volume(&ModelBlob(Vec::new()), &pool[0].volume).unwrap_err();
    assert_ne!(err.code, ErrorCode::Protocol);
    let err = ext.embed_image(&Grid2::filled(0, 0, 0.0)).map(|_| ()).err();
    // an empty image is either embedded or refused, never a broken stream
    assert!(err.is_none_or(|e| e.code != ErrorCode::Protocol));

    drop(ext);
    for s in servers {
        s.join().unwrap();
    }
}
