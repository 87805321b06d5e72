//! In-process end-to-end smoke test: broker simulator, two forwarders,
//! capture and mq2nagios wired together over temp directories and loopback.
//! No network beyond 127.0.0.1, no leftover state on success.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use gridpipe_core::broker_sim::{self, BrokerConfig};
use gridpipe_core::dirq::DirQueue;
use gridpipe_core::forwarder::{self, BrokerUri, ForwarderConfig, Sink, Source};
use gridpipe_core::nagios::{self, Mq2NagiosConfig};
use gridpipe_core::stomp::AckMode;

pub fn run(count: usize) -> Result<(), Box<dyn std::error::Error>> {
    let base = std::env::temp_dir().join(format!(
        "gridpipe-selftest-{}-{}",
        std::process::id(),
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_nanos())
            .unwrap_or(0)
    ));
    std::fs::create_dir_all(&base)?;
    let result = run_in(&base, count);
    let _ = std::fs::remove_dir_all(&base);
    result
}

fn run_in(base: &std::path::Path, count: usize) -> Result<(), Box<dyn std::error::Error>> {
    let outgoing = base.join("outgoing");
    let incoming = base.join("incoming");
    let pipe = base.join("command-pipe");
    std::fs::write(&pipe, b"")?;

    let broker = broker_sim::serve("127.0.0.1:0", BrokerConfig::default())?;
    let uri = BrokerUri::parse(&format!("stomp://127.0.0.1:{}", broker.port()))?;
    println!("selftest: broker simulator on {}", broker.addr());

    // 1. Capture `count` events the way the monitoring engine would.
    for i in 0..count {
        let env: HashMap<String, String> = [
            ("NAGIOS_HOSTNAME", format!("wn{i:03}.example.org")),
            ("NAGIOS_SERVICEDESC", "org.example.SelfTest".to_string()),
            ("NAGIOS_SERVICESTATE", ["OK", "WARNING", "CRITICAL", "UNKNOWN"][i % 4].to_string()),
            ("NAGIOS_TIMET", format!("{}", 1_433_116_800 + i as u64)),
            ("NAGIOS_SERVICEOUTPUT", format!("selftest event {i}")),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
        nagios::capture(&env, &outgoing)?;
    }
    println!("selftest: captured {count} events");

    // 2. Forward them through the broker and back into a second queue.
    let stop = Arc::new(AtomicBool::new(false));
    let mut send = ForwarderConfig::new(
        Source::DirQueue { path: outgoing.clone() },
        Sink::Broker { uri: uri.clone(), destination: "/queue/selftest".to_string() },
    );
    send.run_forever = false;
    send.receipt_timeout = Duration::from_secs(5);

    let mut receive = ForwarderConfig::new(
        Source::Broker {
            uri,
            destination: "/queue/selftest".to_string(),
            ack: AckMode::ClientIndividual,
        },
        Sink::DirQueue { path: incoming.clone() },
    );
    receive.run_forever = true;
    receive.idle_poll = Duration::from_millis(50);

    let receiver = {
        let stop = Arc::clone(&stop);
        std::thread::spawn(move || forwarder::run(&receive, &stop))
    };
    let send_report = forwarder::run(&send, &AtomicBool::new(false))?;
    if send_report.forwarded != count as u64 {
        return Err(format!(
            "selftest: sent {} of {count} events (retried {}, failed {})",
            send_report.forwarded, send_report.retried, send_report.failed
        )
        .into());
    }
    println!("selftest: forwarded {count} events through the broker");

    // Wait for the receiving side to land everything, then stop it.
    let incoming_queue = DirQueue::open(&incoming)?;
    let deadline = Instant::now() + Duration::from_secs(30);
    while incoming_queue.count()? < count {
        if Instant::now() > deadline {
            return Err("selftest: receive side timed out".into());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
    stop.store(true, Ordering::SeqCst);
    receiver
        .join()
        .map_err(|_| "selftest: receiver thread panicked")??;

    // 3. Emit passive checks into the stand-in command pipe.
    let mut emit = Mq2NagiosConfig::new(&incoming, &pipe);
    emit.once = true;
    let report = nagios::run(&emit, &AtomicBool::new(false))?;
    if report.emitted != count as u64 || report.poison != 0 {
        return Err(format!(
            "selftest: emitted {} of {count} (poison {})",
            report.emitted, report.poison
        )
        .into());
    }

    // 4. Verify every event arrived exactly once, in order.
    let text = std::fs::read_to_string(&pipe)?;
    let lines: Vec<&str> = text.lines().collect();
    if lines.len() != count {
        return Err(format!("selftest: pipe has {} lines, expected {count}", lines.len()).into());
    }
    for (i, line) in lines.iter().enumerate() {
        let expected_host = format!("wn{i:03}.example.org");
        let expected_code = i % 4;
        if !line.contains("PROCESS_SERVICE_CHECK_RESULT")
            || !line.contains(&expected_host)
            || !line.contains(&format!(";{expected_code};selftest event {i}"))
        {
            return Err(format!("selftest: line {i} is wrong: {line}").into());
        }
    }
    println!("selftest: {count} passive checks verified, PASS");
    Ok(())
}
