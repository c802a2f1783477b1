use std::io::{BufRead, BufReader, Cursor};
use std::net::TcpListener;
use std::time::Duration;

use kilosound::dsp::{synthetic_corpus, FrontEnd, SAMPLE_RATE};
use kilosound::model::{Backbone, Classifier, MlpHead, ModelConfig};
use kilosound::runtime::{
    monitor, Backoff, BoundedQueue, ClipSource, EventSink, InferenceEngine, ModeEvent, MonitorOptions, Publisher, TcpSink,
    BUDGET_MS,
};

fn engine() -> InferenceEngine {
    let classifier = Classifier::new(
        Backbone::new(ModelConfig::child(16, 1, 1), 1).unwrap(),
        MlpHead::new(16, 10, 2).unwrap(),
        FrontEnd::standard().settings().clone(),
    )
    .unwrap();
    InferenceEngine::new(classifier, BUDGET_MS).unwrap()
}

#[test]
fn paced_stream_drops_nothing() {
    let clips = synthetic_corpus(6, SAMPLE_RATE, 3).unwrap();
    let opts = MonitorOptions { capacity: 2, pace: Some(Duration::from_millis(30)) };
    let mut ids = Vec::new();
    let summary = monitor(&engine(), ClipSource::Clips(clips), &opts, &mut Publisher::new(vec![]), &mut |e| ids.push(e.clip_id)).unwrap();
    assert_eq!((summary.produced, summary.processed, summary.drops), (6, 6, 0));
    assert!(ids.windows(2).all(|w| w[1] == w[0] + 1));
}

#[test]
fn raw_pcm_stream_is_cut_into_seconds() {
    let n = SAMPLE_RATE as usize * 2 + 1000;
    let bytes: Vec<u8> = (0..n).flat_map(|i| (((i % 200) as i16 - 100) * 50).to_le_bytes()).collect();
    let source = ClipSource::Pcm(Box::new(Cursor::new(bytes)));
    let summary = monitor(&engine(), source, &MonitorOptions::default(), &mut Publisher::new(vec![]), &mut |_| {}).unwrap();
    assert_eq!(summary.processed, 2);
}

#[test]
fn queue_evicts_the_oldest_item() {
    let q = BoundedQueue::new(2).unwrap();
    assert_eq!(q.push(1), None);
    assert_eq!(q.push(2), None);
    assert_eq!(q.push(3), Some(1));
    assert_eq!((q.drops(), q.len(), q.high_water()), (1, 2, 2));
    q.close();
    assert_eq!(q.pop(), Some(2));
    assert_eq!(q.pop(), Some(3));
    assert_eq!(q.pop(), None);
}

#[test]
fn tcp_sink_delivers_ndjson_lines() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    let reader = std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        BufReader::new(stream).lines().take(3).map(Result::unwrap).collect::<Vec<_>>()
    });
    let clip = synthetic_corpus(1, SAMPLE_RATE, 4).unwrap().remove(0);
    let eng = engine();
    let mut sink = TcpSink::with_options(addr, Backoff::default(), 16);
    let events: Vec<ModeEvent> = (0..3).map(|i| eng.infer_clip(i, &clip, 0).unwrap()).collect();
    for e in &events {
        sink.publish(&e.to_line());
    }
    sink.flush();
    let lines = reader.join().unwrap();
    for (line, e) in lines.iter().zip(&events) {
        assert_eq!(&ModeEvent::from_line(line).unwrap(), e);
    }
}
