use std::thread;

use twinforge::ingestion::{
    replay_position_stream, series_sink, write_position_log, LocationListener, LogFormat,
    PositionSample,
};

#[test]
fn loopback_replay_delivers_every_line_in_order() {
    let samples: Vec<PositionSample> = (0..100)
        .map(|i| PositionSample::new(format!("T{}", i % 3), i * 200, i as f64 * 0.01, 0.5, 0.0))
        .collect();
    let payload = write_position_log(&samples, LogFormat::Jsonl);

    let listener = LocationListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (mut writer, reader) = series_sink();
    let server = thread::spawn(move || listener.accept_session(&mut writer).unwrap());

    assert_eq!(
        replay_position_stream(addr, payload.as_slice()).unwrap(),
        100
    );
    let summary = server.join().unwrap();
    assert_eq!(summary.accepted, 100);
    assert_eq!(summary.rejected, 0);
    assert_eq!(reader.snapshot(), samples);
}

#[test]
fn malformed_lines_are_counted_not_fatal() {
    let payload = b"{\"id\":\"T1\",\"ts\":0,\"x\":0.0,\"y\":0.0,\"z\":0.0}\nnot json\n\n{\"id\":\"T1\",\"ts\":200,\"x\":1.0,\"y\":0.0,\"z\":0.0}";
    let listener = LocationListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let (mut writer, reader) = series_sink();
    let server = thread::spawn(move || listener.accept_session(&mut writer).unwrap());

    assert_eq!(replay_position_stream(addr, &payload[..]).unwrap(), 4);
    let summary = server.join().unwrap();
    assert_eq!((summary.accepted, summary.rejected), (2, 2));
    assert_eq!(
        summary
            .rejections
            .iter()
            .map(|r| r.line)
            .collect::<Vec<_>>(),
        vec![2, 3]
    );
    assert_eq!(reader.len(), 2);
}
