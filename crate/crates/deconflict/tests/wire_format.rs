//! Byte-level shapes that an external client relies on.

use deconflict_core::engine::{run_episode, EngineParams};
use deconflict_core::fixtures::{spawn, straight};
use deconflict_core::policy::{Policy, PolicyAssignment, RulePolicy};
use deconflict_core::protocol::{ErrorFrame, Frame, Hello, PartnerAssignment, Request, Response, PROTOCOL_VERSION};
use deconflict_core::{Action, Airspace};
use deconflict::formats;
use serde_json::{json, Value};

fn to_value(f: &Frame) -> Value {
    serde_json::to_value(f).unwrap()
}

#[test]
fn hello_and_bye_shapes() {
    let h = Frame::Hello(Hello {
        version: PROTOCOL_VERSION,
        name: None,
        system_prompt: Some("sys".into()),
        max_response_chars: Some(256),
    });
    assert_eq!(
        serde_json::to_string(&h).unwrap(),
        r#"{"type":"hello","version":1,"system_prompt":"sys","max_response_chars":256}"#
    );
    assert_eq!(serde_json::to_string(&Frame::Bye).unwrap(), r#"{"type":"bye"}"#);
    let back: Frame = serde_json::from_str(r#"{"type":"hello","version":1,"name":"echo"}"#).unwrap();
    assert!(matches!(back, Frame::Hello(Hello { version: 1, name: Some(ref n), .. }) if n == "echo"));
}

#[test]
fn request_carries_the_full_observation() {
    let mut scn = straight(3000.0);
    scn.spawn_plan.push(spawn("A01", "X", "R_1", 0.0, 30.0));
    let air = Airspace::new_unchecked(scn);
    let mut rule = RulePolicy::new(Default::default());
    let mut ps: Vec<&mut dyn Policy> = vec![&mut rule];
    let out = run_episode(&air, &mut ps, &PolicyAssignment::all(0), &EngineParams::default(), 0).unwrap();
    let rec = &out.log[0];
    let req = Frame::Request(Request {
        version: PROTOCOL_VERSION,
        episode: 0,
        tick: rec.tick,
        agent_id: rec.agent_id.clone(),
        prompt: "p".into(),
        observation: Some(rec.observation.clone()),
        seed: Some(rec.decision_seed),
        deadline_ms: 1000,
    });
    let v = to_value(&req);
    assert_eq!(v["type"], "request");
    assert_eq!(v["version"], 1);
    assert_eq!(v["agent_id"], "A01");
    assert_eq!(v["deadline_ms"], 1000);
    for key in ["ownship", "intruders", "desired_spd_mps"] {
        assert!(v["observation"].get(key).is_some(), "observation lacks {key}: {}", v["observation"]);
    }
    let own = &v["observation"]["ownship"];
    for key in ["speed_mps", "dist_to_nxt_wpt_m", "min_spd_mps", "max_spd_mps"] {
        assert!(own.get(key).is_some(), "ownship lacks {key}");
    }
    let back: Frame = serde_json::from_value(v).unwrap();
    assert_eq!(back, req);
}

#[test]
fn optional_request_fields_default() {
    let f: Frame =
        serde_json::from_str(r#"{"type":"request","version":1,"episode":2,"tick":5,"agent_id":"B03","prompt":"x"}"#)
            .unwrap();
    let Frame::Request(r) = f else { panic!("not a request") };
    assert_eq!(r.deadline_ms, 1000);
    assert!(r.observation.is_none() && r.seed.is_none());
    assert!(r.validate().is_ok());
    let empty = Request { prompt: String::new(), ..r };
    assert!(empty.validate().is_err());
}

#[test]
fn response_and_error_shapes() {
    let r = Frame::Response(Response {
        agent_id: "A01".into(),
        tick: 3,
        text: "The recommended action is: Hold.".into(),
        partner: None,
    });
    assert_eq!(
        serde_json::to_string(&r).unwrap(),
        r#"{"type":"response","agent_id":"A01","tick":3,"text":"The recommended action is: Hold."}"#
    );
    let with_partner: Frame = serde_json::from_value(json!({
        "type": "response", "agent_id": "A01", "tick": 3, "text": "Accelerate",
        "partner": {"agent_id": "B02", "action": "Decelerate"}
    }))
    .unwrap();
    assert!(matches!(
        with_partner,
        Frame::Response(Response { partner: Some(PartnerAssignment { ref agent_id, action: Action::Decelerate }), .. })
            if agent_id == "B02"
    ));
    let e = Frame::Error(ErrorFrame {
        agent_id: Some("A01".into()),
        tick: Some(3),
        message: "backend timeout".into(),
    });
    assert_eq!(
        serde_json::to_string(&e).unwrap(),
        r#"{"type":"error","agent_id":"A01","tick":3,"message":"backend timeout"}"#
    );
    let bare: Frame = serde_json::from_str(r#"{"type":"error","message":"bad"}"#).unwrap();
    assert!(matches!(bare, Frame::Error(ErrorFrame { agent_id: None, tick: None, .. })));
}

#[test]
fn unknown_type_is_rejected() {
    assert!(serde_json::from_str::<Frame>(r#"{"type":"ping"}"#).is_err());
    assert!(serde_json::from_str::<Frame>(r#"{"version":1}"#).is_err());
}

#[test]
fn tick_log_round_trips_through_jsonl() {
    let mut scn = straight(2000.0);
    scn.spawn_plan.push(spawn("A01", "Y", "R_1", 0.0, 25.0));
    let air = Airspace::new_unchecked(scn);
    let mut rule = RulePolicy::new(Default::default());
    let mut ps: Vec<&mut dyn Policy> = vec![&mut rule];
    let out = run_episode(&air, &mut ps, &PolicyAssignment::all(0), &EngineParams::default(), 4).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("log.jsonl");
    assert_eq!(formats::write_tick_log(&p, &out.log).unwrap(), out.log.len());
    assert_eq!(formats::read_tick_log(&p).unwrap(), out.log);
    let csv = dir.path().join("traj.csv");
    formats::write_trajectory_csv(&csv, &out.log).unwrap();
    let text = std::fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "tick,t_s,agent_id,route_id,lat,lon,alt_m,speed_mps,heading_deg,next_wpt_id,dist_to_nxt_wpt_m,intruders_ahead,applied"
    );
    assert_eq!(lines.count(), out.log.len());
}
