use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use collab_core::adapter::sign_request;
use collab_core::clock::ManualClock;
use collab_core::persistence::{compute_analytics, snapshots_after, EventKind, EventStore, TagLexicon};
use collab_core::persona::{compile_system_prompt, DescriptorTable, PersonaSpec, DEFAULT_MAX_PROMPT_CHARS};
use collab_service::{router, spawn_ticker, AppState, ServiceConfig};

const TOKEN: &str = "researcher-secret";
const START: f64 = 1_700_000_000.0;

struct Harness {
    app: Router,
    state: Arc<AppState>,
    clock: ManualClock,
}

fn harness_with(toml: &str, extra_env: &[(&str, &str)]) -> Harness {
    let config = ServiceConfig::parse(toml, None).unwrap();
    let mut env: Vec<(String, String)> = vec![("COLLAB_RESEARCHER_TOKEN".into(), TOKEN.into())];
    env.extend(extra_env.iter().map(|(k, v)| (k.to_string(), v.to_string())));
    let resolved = config
        .resolve(|k| env.iter().find(|(n, _)| n == k).map(|(_, v)| v.clone()))
        .unwrap();
    let clock = ManualClock::new(START);
    let state = AppState::new(config, resolved, Arc::new(clock.clone())).unwrap();
    Harness {
        app: router(state.clone()),
        state,
        clock,
    }
}

fn harness() -> Harness {
    harness_with("tick_millis = 20", &[])
}

struct Reply {
    status: StatusCode,
    headers: axum::http::HeaderMap,
    bytes: Vec<u8>,
}

impl Reply {
    fn json(&self) -> Value {
        serde_json::from_slice(&self.bytes).unwrap_or_else(|e| panic!("{e}: {}", String::from_utf8_lossy(&self.bytes)))
    }

    fn text(&self) -> String {
        String::from_utf8(self.bytes.clone()).unwrap()
    }
}

impl Harness {
    async fn send(&self, req: Request<Body>) -> Reply {
        let resp = self.app.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let headers = resp.headers().clone();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
        Reply { status, headers, bytes }
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> Reply {
        let mut b = Request::builder()
            .method(method)
            .uri(uri)
            .header("authorization", format!("Bearer {TOKEN}"));
        if body.is_some() {
            b = b.header("content-type", "application/json");
        }
        let body = body.map(|v| Body::from(v.to_string())).unwrap_or_else(Body::empty);
        self.send(b.body(body).unwrap()).await
    }

    async fn create(&self, config: Value) -> String {
        let r = self.call("POST", "/v1/experiments", Some(config)).await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
        r.json()["experiment_id"].as_str().unwrap().to_string()
    }

    async fn open_experiment(&self, config: Value) -> String {
        let id = self.create(config).await;
        let r = self.call("POST", &format!("/v1/experiments/{id}/open"), None).await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        id
    }

    async fn start(&self, exp: &str, team: Value) -> Value {
        let r = self
            .call(
                "POST",
                &format!("/v1/experiments/{exp}/sessions"),
                Some(json!({ "team": team })),
            )
            .await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
        r.json()
    }

    async fn say(&self, session: &str, speaker: &str, content: &str) -> Value {
        let r = self
            .call(
                "POST",
                &format!("/v1/sessions/{session}/messages"),
                Some(json!({ "speaker_id": speaker, "content": content })),
            )
            .await;
        assert_eq!(r.status, StatusCode::OK, "{}", r.text());
        r.json()
    }
}

fn config(team_size: usize) -> Value {
    json!({
        "persona": { "name": "Sam" },
        "task": { "title": "Desert survival", "instructions": "Rank the items." },
        "composition": { "team_size": team_size },
        "gateway": { "model_id": "scripted", "backend": "scripted", "fallback": "Let's rank the water first." },
        "duration_seconds": 600
    })
}

fn team() -> Value {
    json!([
        { "participant_id": "p1", "display_name": "Ann", "consent": true },
        { "participant_id": "p2", "display_name": "Ben", "consent": true }
    ])
}

#[tokio::test]
async fn readiness_needs_no_token_but_the_api_does() {
    let h = harness();
    let r = h
        .send(Request::get("/healthz/ready").body(Body::empty()).unwrap())
        .await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["status"], "ready");

    let r = h
        .send(Request::get("/v1/experiments").body(Body::empty()).unwrap())
        .await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    assert_eq!(r.json()["error"], "unauthorized");
    let r = h
        .send(
            Request::get("/v1/experiments")
                .header("x-researcher-token", "nope")
                .body(Body::empty())
                .unwrap(),
        )
        .await;
    assert_eq!(r.status, StatusCode::UNAUTHORIZED);
    let r = h
        .send(
            Request::get("/v1/experiments")
                .header("x-researcher-token", TOKEN)
                .body(Body::empty())
                .unwrap(),
        )
        .await;
    assert_eq!(r.status, StatusCode::OK);
}

#[tokio::test]
async fn experiment_validation_is_exhaustive() {
    let h = harness();
    let id = h.create(json!({ "persona": { "name": "Sam" } })).await;
    let got = h.call("GET", &format!("/v1/experiments/{id}"), None).await.json();
    assert_eq!(got["status"], "draft");

    let mut bad = config(2);
    bad["gateway"]["temperature"] = json!(3.0);
    bad["composition"]["gender_targets"] = json!({ "F": 1 });
    let r = h.call("POST", "/v1/experiments", Some(bad)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    let details: Vec<String> = serde_json::from_value(r.json()["details"].clone()).unwrap();
    assert!(details.iter().any(|d| d.contains("temperature")), "{details:?}");
    assert!(details.iter().any(|d| d.contains("gender_targets")), "{details:?}");

    let r = h.call("POST", "/v1/experiments", Some(json!({ "persona": 7 }))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["error"], "validation");
}

#[tokio::test]
async fn idempotency_key_creates_one_experiment() {
    let h = harness();
    let req = |key: &str, body: &Value| {
        Request::post("/v1/experiments")
            .header("authorization", format!("Bearer {TOKEN}"))
            .header("content-type", "application/json")
            .header("idempotency-key", key)
            .body(Body::from(body.to_string()))
            .unwrap()
    };
    let body = config(2);
    let (a, b) = tokio::join!(h.send(req("k1", &body)), h.send(req("k1", &body)));
    assert_eq!(a.status, StatusCode::CREATED);
    assert_eq!(a.bytes, b.bytes);
    let replays = [&a, &b]
        .iter()
        .filter(|r| r.headers.contains_key("idempotent-replay"))
        .count();
    assert_eq!(replays, 1);
    assert_eq!(
        h.call("GET", "/v1/experiments", None)
            .await
            .json()
            .as_array()
            .unwrap()
            .len(),
        1
    );

    let r = h.send(req("k1", &config(3))).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(r.json()["error"], "idempotency_key_reused");
    h.send(req("k2", &body)).await;
    assert_eq!(
        h.call("GET", "/v1/experiments", None)
            .await
            .json()
            .as_array()
            .unwrap()
            .len(),
        2
    );
}

async fn upload(h: &Harness, exp: &str, name: &str, bytes: Vec<u8>) -> Reply {
    h.send(
        Request::post(format!("/v1/experiments/{exp}/documents?name={name}"))
            .header("authorization", format!("Bearer {TOKEN}"))
            .body(Body::from(bytes))
            .unwrap(),
    )
    .await
}

#[tokio::test]
async fn documents_are_content_addressed_and_capped() {
    let h = harness();
    let exp = h.create(config(2)).await;
    let text: Vec<u8> = "water mirror map ".repeat(700).into_bytes();
    assert!(text.len() > 10 * 1024 - 1);
    let a = upload(&h, &exp, "brief.txt", text.clone()).await;
    let b = upload(&h, &exp, "brief.txt", text.clone()).await;
    assert_eq!(a.status, StatusCode::CREATED);
    let (a, b) = (a.json(), b.json());
    assert_eq!(a["digest"], b["digest"]);
    assert_ne!(a["document_id"], b["document_id"]);

    let big = upload(&h, &exp, "big.txt", vec![b'a'; 2 << 20]).await;
    assert_eq!(big.status, StatusCode::PAYLOAD_TOO_LARGE);
    let binary = upload(&h, &exp, "x.bin", vec![0xff, 0xfe, 0x00]).await;
    assert_eq!(binary.status, StatusCode::UNSUPPORTED_MEDIA_TYPE);
    let listed = h
        .call("GET", &format!("/v1/experiments/{exp}/documents"), None)
        .await
        .json();
    assert_eq!(listed.as_array().unwrap().len(), 2);
}

#[tokio::test]
async fn sessions_follow_the_experiment_lifecycle() {
    let h = harness();
    let exp = h.create(config(2)).await;
    let r = h
        .call(
            "POST",
            &format!("/v1/experiments/{exp}/sessions"),
            Some(json!({ "team": team() })),
        )
        .await;
    assert_eq!(
        r.status,
        StatusCode::CONFLICT,
        "draft experiments cannot start sessions"
    );

    h.call("POST", &format!("/v1/experiments/{exp}/open"), None).await;
    let r = h
        .call(
            "POST",
            &format!("/v1/experiments/{exp}/sessions"),
            Some(json!({ "team": [team()[0].clone()] })),
        )
        .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY, "wrong team size");

    let info = h.start(&exp, team()).await;
    let sid = info["session_id"].as_str().unwrap().to_string();
    assert_eq!(info["state"]["deadline"].as_f64().unwrap(), START + 600.0);
    let events = h.state.store().events(&sid).unwrap();
    assert_eq!(events[0].kind, EventKind::SessionStart);
    assert_eq!(events[1].kind, EventKind::Message);
    assert_eq!(events[1].content(), Some("Desert survival: Rank the items."));
    assert_eq!(
        h.call("GET", &format!("/v1/experiments/{exp}"), None).await.json()["status"],
        "running"
    );

    // a second team may run at the same time
    let other = h.start(&exp, team()).await;
    assert_ne!(other["session_id"], info["session_id"]);

    let stop = h.call("POST", &format!("/v1/sessions/{sid}/stop"), None).await;
    assert_eq!(stop.status, StatusCode::OK);
    let again = h.call("POST", &format!("/v1/sessions/{sid}/stop"), None).await;
    assert_eq!(stop.json(), again.json(), "stopping twice returns the same record");
    let late = h
        .call(
            "POST",
            &format!("/v1/sessions/{sid}/messages"),
            Some(json!({ "speaker_id": "p1", "content": "hi" })),
        )
        .await;
    assert_eq!(late.status, StatusCode::CONFLICT);

    let closed = h
        .call("POST", &format!("/v1/experiments/{exp}/close"), None)
        .await
        .json();
    assert_eq!(closed["ended_sessions"].as_array().unwrap().len(), 1);
    let ended = h
        .call(
            "GET",
            &format!("/v1/sessions/{}", other["session_id"].as_str().unwrap()),
            None,
        )
        .await;
    assert_eq!(ended.json()["state"]["status"], "ended");
}

#[tokio::test]
async fn loopback_messages_run_the_pipeline() {
    let h = harness();
    let exp = h.open_experiment(config(2)).await;
    let info = h.start(&exp, team()).await;
    let (sid, channel) = (
        info["session_id"].as_str().unwrap().to_string(),
        info["state"]["channel_id"].as_str().unwrap().to_string(),
    );

    h.clock.advance(5.0);
    let out = h.say(&sid, "p1", "Sam, which item should go first?").await;
    assert_eq!(out["decision"], json!({ "respond": true, "reason": "mentioned" }));
    assert_eq!(out["reply"]["text"], "Let's rank the water first.");
    assert_eq!(out["delivered"].as_array().unwrap().len(), 1);

    h.clock.advance(1.0);
    let out = h.say(&sid, "p2", "Sam what about the mirror?").await;
    assert_eq!(out["decision"]["reason"], "cooldown");
    assert!(out["reply"].is_null());

    let r = h
        .call(
            "POST",
            &format!("/v1/sessions/{sid}/messages"),
            Some(json!({ "speaker_id": "zed", "content": "hi" })),
        )
        .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let sent: Vec<String> = h
        .state
        .loopback()
        .messages(&channel)
        .into_iter()
        .map(|m| m.text)
        .collect();
    assert_eq!(
        sent,
        ["Desert survival: Rank the items.", "Let's rank the water first."]
    );

    let events = h.state.store().events(&sid).unwrap();
    let analytics = h
        .call("GET", &format!("/v1/sessions/{sid}/analytics"), None)
        .await
        .json();
    let expected = compute_analytics(&sid, &events, &TagLexicon::starter());
    assert_eq!(analytics, serde_json::to_value(&expected).unwrap());
    assert_eq!(
        analytics["message_counts"],
        json!({ "p1": 1, "p2": 1, "collab-bot": 1 })
    );

    let after = h
        .call("GET", &format!("/v1/sessions/{sid}/events?after_seq=2"), None)
        .await
        .json();
    assert_eq!(after.as_array().unwrap()[0]["seq"], 3);

    let transcript = h
        .call("GET", &format!("/v1/sessions/{sid}/export?format=transcript"), None)
        .await;
    assert!(transcript.headers["content-type"]
        .to_str()
        .unwrap()
        .starts_with("text/plain"));
    assert!(
        transcript.text().contains("Ann: Sam, which item should go first?"),
        "{}",
        transcript.text()
    );
    let log = h
        .call("GET", &format!("/v1/sessions/{sid}/export?format=events"), None)
        .await;
    let (decoded_id, decoded) = collab_core::persistence::decode_log(&log.text()).unwrap();
    assert_eq!((decoded_id, decoded), (sid.clone(), events));
}

#[tokio::test]
async fn deadline_ends_the_session_within_a_tick() {
    let h = harness();
    let ticker = spawn_ticker(h.state.clone());
    let exp = h.open_experiment(config(2)).await;
    let sid = h.start(&exp, team()).await["session_id"].as_str().unwrap().to_string();
    tokio::time::sleep(Duration::from_millis(100)).await;
    assert!(!h.state.store().is_ended(&sid).unwrap());

    h.clock.advance(600.0);
    let mut ended = false;
    for _ in 0..100 {
        tokio::time::sleep(Duration::from_millis(20)).await;
        if h.state.store().is_ended(&sid).unwrap() {
            ended = true;
            break;
        }
    }
    ticker.abort();
    assert!(ended, "no deadline end");
    let last = h.state.store().events(&sid).unwrap().pop().unwrap();
    assert_eq!(last.payload_str("reason"), Some("deadline"));
    assert_eq!(last.timestamp, START + 600.0);
}

fn parse_sse(text: &str) -> Vec<(String, Option<u64>, Value)> {
    text.split("\n\n")
        .filter(|block| block.contains("data:"))
        .map(|block| {
            let mut name = String::from("message");
            let (mut id, mut data) = (None, String::new());
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = v.trim().to_string();
                } else if let Some(v) = line.strip_prefix("id:") {
                    id = v.trim().parse().ok();
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            (name, id, serde_json::from_str(&data).unwrap())
        })
        .collect()
}

#[tokio::test]
async fn analytics_stream_resumes_and_ends() {
    let h = harness();
    let exp = h.open_experiment(config(2)).await;
    let sid = h.start(&exp, team()).await["session_id"].as_str().unwrap().to_string();
    h.say(&sid, "p1", "the water matters most").await;
    h.say(&sid, "p2", "Sam do you agree?").await;
    h.call("POST", &format!("/v1/sessions/{sid}/stop"), None).await;
    let events = h.state.store().events(&sid).unwrap();
    let lex = TagLexicon::starter();

    let r = h
        .call("GET", &format!("/v1/sessions/{sid}/analytics/stream?from_seq=2"), None)
        .await;
    assert!(r.headers["content-type"]
        .to_str()
        .unwrap()
        .starts_with("text/event-stream"));
    let frames = parse_sse(&r.text());
    let (end, snaps) = frames.split_last().unwrap();
    assert_eq!(end.0, "end");
    assert_eq!(
        end.2,
        serde_json::to_value(compute_analytics(&sid, &events, &lex)).unwrap()
    );
    let ids: Vec<u64> = snaps.iter().map(|f| f.1.unwrap()).collect();
    assert_eq!(ids, (3..=events.len() as u64).collect::<Vec<_>>());
    let expected: Vec<Value> = snapshots_after(&sid, &events, 2, &lex)
        .iter()
        .map(|s| serde_json::to_value(s).unwrap())
        .collect();
    assert_eq!(snaps.iter().map(|f| f.2.clone()).collect::<Vec<_>>(), expected);

    // Last-Event-ID resumes the same way
    let r = h
        .send(
            Request::get(format!("/v1/sessions/{sid}/analytics/stream"))
                .header("x-researcher-token", TOKEN)
                .header("last-event-id", (events.len() - 1).to_string())
                .body(Body::empty())
                .unwrap(),
        )
        .await;
    let frames = parse_sse(&r.text());
    assert_eq!(frames.len(), 2);
    assert_eq!(frames[0].1, Some(events.len() as u64));

    let r = h.call("GET", "/v1/sessions/nope/analytics/stream", None).await;
    assert_eq!(r.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn analytics_stream_pushes_live_events() {
    let h = harness();
    let exp = h.open_experiment(config(2)).await;
    let sid = h.start(&exp, team()).await["session_id"].as_str().unwrap().to_string();
    let resp = h
        .app
        .clone()
        .oneshot(
            Request::get(format!("/v1/sessions/{sid}/analytics/stream?access_token={TOKEN}"))
                .body(Body::empty())
                .unwrap(),
        )
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    let mut body = resp.into_body();
    let mut seen = String::new();
    let mut next_frame = async |seen: &mut String| {
        let f = tokio::time::timeout(Duration::from_secs(5), body.frame())
            .await
            .unwrap()
            .unwrap()
            .unwrap();
        if let Ok(data) = f.into_data() {
            seen.push_str(std::str::from_utf8(&data).unwrap());
        }
    };
    while parse_sse(&seen).len() < 2 {
        next_frame(&mut seen).await;
    }
    h.say(&sid, "p1", "the water matters most").await;
    let total = h.state.store().events(&sid).unwrap().len();
    while parse_sse(&seen).len() < total {
        next_frame(&mut seen).await;
    }
    let frames = parse_sse(&seen);
    let ids: Vec<u64> = frames.iter().map(|f| f.1.unwrap()).collect();
    assert_eq!(ids, (1..=total as u64).collect::<Vec<_>>());
    assert_eq!(frames.last().unwrap().2["total_messages"], 1);
}

#[tokio::test]
async fn pool_matching_starts_a_session_per_team() {
    let h = harness();
    let exp = h.open_experiment(config(2)).await;
    for i in 0..5 {
        let r = h
            .call(
                "POST",
                &format!("/v1/experiments/{exp}/pool"),
                Some(
                    json!({ "participant_id": format!("u{i}"), "display_name": format!("User {i}"), "consent": true }),
                ),
            )
            .await;
        assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
    }
    let dup = h
        .call(
            "POST",
            &format!("/v1/experiments/{exp}/pool"),
            Some(json!({ "participant_id": "u0", "display_name": "U" })),
        )
        .await;
    assert_eq!(dup.status, StatusCode::CONFLICT);

    let out = h
        .call("POST", &format!("/v1/experiments/{exp}/match"), None)
        .await
        .json();
    let sessions = out["sessions"].as_array().unwrap();
    assert_eq!(sessions.len(), 2);
    assert_eq!(out["residual"], 1);
    let members: Vec<Vec<&str>> = sessions
        .iter()
        .map(|s| {
            s["state"]["participants"]
                .as_array()
                .unwrap()
                .iter()
                .filter(|p| p["is_bot"] == false)
                .map(|p| p["participant_id"].as_str().unwrap())
                .collect()
        })
        .collect();
    assert_eq!(members, [["u0", "u1"], ["u2", "u3"]]);

    let pool = h.call("GET", &format!("/v1/experiments/{exp}/pool"), None).await.json();
    assert_eq!(pool[0]["participant_id"], "u4");
    let left = h.call("DELETE", &format!("/v1/experiments/{exp}/pool/u4"), None).await;
    assert_eq!(left.status, StatusCode::NO_CONTENT);
    let gone = h.call("DELETE", &format!("/v1/experiments/{exp}/pool/u4"), None).await;
    assert_eq!(gone.status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn sessions_can_start_from_pool_members() {
    let h = harness();
    let exp = h.open_experiment(config(2)).await;
    for p in team().as_array().unwrap() {
        h.call("POST", &format!("/v1/experiments/{exp}/pool"), Some(p.clone()))
            .await;
    }
    let r = h
        .call(
            "POST",
            &format!("/v1/experiments/{exp}/sessions"),
            Some(json!({ "participant_ids": ["p2", "p1"], "channel_id": "room-1" })),
        )
        .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
    assert_eq!(r.json()["state"]["channel_id"], "room-1");
    assert!(h
        .call("GET", &format!("/v1/experiments/{exp}/pool"), None)
        .await
        .json()
        .as_array()
        .unwrap()
        .is_empty());
    let busy = h
        .call(
            "POST",
            &format!("/v1/experiments/{exp}/sessions"),
            Some(json!({ "team": team(), "channel_id": "room-1" })),
        )
        .await;
    assert_eq!(busy.status, StatusCode::CONFLICT);
}

#[tokio::test]
async fn persona_preview_matches_the_compiler() {
    let h = harness();
    let spec: PersonaSpec = serde_json::from_value(json!({
        "name": "Sam",
        "facets": [{ "trait": "extraversion", "facet": "dominance", "level": "high" }]
    }))
    .unwrap();
    let r = h
        .call(
            "POST",
            "/v1/persona/compile",
            Some(serde_json::to_value(&spec).unwrap()),
        )
        .await;
    assert_eq!(r.status, StatusCode::OK);
    let table = DescriptorTable::default_table();
    assert_eq!(
        r.json()["prompt"],
        compile_system_prompt(&spec, &table, DEFAULT_MAX_PROMPT_CHARS).unwrap()
    );

    let unknown = json!({ "name": "Sam", "facets": [{ "trait": "openness", "facet": "nope", "level": "low" }] });
    let r = h.call("POST", "/v1/persona/compile", Some(unknown)).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let stale = json!({ "name": "Sam", "table_version": "not-the-current-one" });
    let r = h.call("POST", "/v1/persona/compile", Some(stale)).await;
    assert_eq!(r.status, StatusCode::CONFLICT);
    assert_eq!(r.json()["error"], "stale_table_version");
}

#[tokio::test]
async fn descriptor_table_round_trips() {
    let h = harness();
    let got = h.call("GET", "/v1/descriptor-table", None).await.json();
    let table = DescriptorTable::default_table();
    assert_eq!(got["version"], table.version());
    assert_eq!(got["facets"].as_array().unwrap().len(), table.facets().len());

    let put = |text: String| {
        Request::put("/v1/descriptor-table")
            .header("authorization", format!("Bearer {TOKEN}"))
            .header("content-type", "text/plain")
            .body(Body::from(text))
            .unwrap()
    };
    let r = h.send(put("this is not a table".into())).await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);

    let text = got["text"].as_str().unwrap().replacen(table.version(), "v-next", 1);
    let r = h.send(put(text)).await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    assert_eq!(
        h.call("GET", "/v1/descriptor-table", None).await.json()["version"],
        "v-next"
    );
    assert_eq!(h.state.table().version(), "v-next");
}

#[tokio::test]
async fn sweeps_run_offline() {
    let h = harness();
    let fixture = json!({
        "participants": [{ "participant_id": "a", "display_name": "Ann" }, { "participant_id": "b", "display_name": "Ben" }],
        "lines": [
            { "speaker": "a", "text": "water first", "at_offset_seconds": 0 },
            { "speaker": "b", "text": "then the mirror", "at_offset_seconds": 20 },
            { "speaker": "a", "text": "Sam, agree?", "at_offset_seconds": 40 }
        ]
    });
    let r = h
        .call(
            "POST",
            "/v1/sweeps",
            Some(json!({ "base": config(2), "grid": { "k": [3] }, "fixture": fixture.clone() })),
        )
        .await;
    assert_eq!(r.status, StatusCode::OK, "{}", r.text());
    let rows = r.json();
    assert_eq!(rows.as_array().unwrap().len(), 1);
    assert_eq!(rows[0]["retrieval_overlap"], 1.0);

    let r = h
        .call(
            "POST",
            "/v1/sweeps",
            Some(json!({ "base": config(2), "grid": {}, "fixture": fixture })),
        )
        .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

// -- Slack

const SECRET: &str = "slack-signing-secret";

fn slack_harness() -> Harness {
    harness_with(
        "tick_millis = 20\n[slack]\nbot_user_id = \"UBOT\"\napi_base_url = \"http://127.0.0.1:9\"\n",
        &[("SLACK_SIGNING_SECRET", SECRET), ("SLACK_BOT_TOKEN", "xoxb-test")],
    )
}

fn slack_request(body: &str, ts: i64, secret: &str) -> Request<Body> {
    let sig = sign_request(secret.as_bytes(), &ts.to_string(), body.as_bytes());
    Request::post("/slack/events")
        .header("x-slack-request-timestamp", ts.to_string())
        .header("x-slack-signature", sig)
        .header("content-type", "application/json")
        .body(Body::from(body.to_string()))
        .unwrap()
}

#[tokio::test]
async fn slack_callbacks_are_verified_and_deduplicated() {
    let h = slack_harness();
    let now = START as i64;
    let challenge = json!({ "type": "url_verification", "challenge": "abc123" }).to_string();
    let r = h.send(slack_request(&challenge, now, SECRET)).await;
    assert_eq!(r.status, StatusCode::OK);
    assert_eq!(r.json()["challenge"], "abc123");

    assert_eq!(
        h.send(slack_request(&challenge, now, "wrong")).await.status,
        StatusCode::UNAUTHORIZED
    );
    assert_eq!(
        h.send(slack_request(&challenge, now - 301, SECRET)).await.status,
        StatusCode::UNAUTHORIZED
    );
    let mut tampered = slack_request(&challenge, now, SECRET);
    *tampered.body_mut() = Body::from(challenge.replace("abc123", "abc124"));
    assert_eq!(h.send(tampered).await.status, StatusCode::UNAUTHORIZED);
    // verified but unparseable: acknowledged so it is not redelivered
    assert_eq!(
        h.send(slack_request("{not json", now, SECRET)).await.status,
        StatusCode::OK
    );

    let exp = h.open_experiment(config(2)).await;
    let team = json!([
        { "participant_id": "U1", "display_name": "Ann" },
        { "participant_id": "U2", "display_name": "Ben" }
    ]);
    let r = h
        .call(
            "POST",
            &format!("/v1/experiments/{exp}/sessions"),
            Some(json!({ "team": team, "platform": "slack", "channel_id": "C42" })),
        )
        .await;
    assert_eq!(r.status, StatusCode::CREATED, "{}", r.text());
    let sid = r.json()["session_id"].as_str().unwrap().to_string();

    let message = |ts: &str, user: &str, text: &str| {
        json!({
            "type": "event_callback",
            "event": { "type": "message", "channel": "C42", "user": user, "text": text, "ts": ts }
        })
        .to_string()
    };
    for _ in 0..3 {
        for (ts, user, text) in [
            ("1700000001.000100", "U1", "water first"),
            ("1700000002.000100", "U2", "then the mirror"),
        ] {
            assert_eq!(
                h.send(slack_request(&message(ts, user, text), now, SECRET))
                    .await
                    .status,
                StatusCode::OK
            );
        }
    }
    // the bot's own posts never come back in
    h.send(slack_request(
        &message("1700000003.000100", "UBOT", "echo"),
        now,
        SECRET,
    ))
    .await;

    let mut contents = Vec::new();
    for _ in 0..100 {
        tokio::time::sleep(Duration::from_millis(20)).await;
        contents = h
            .state
            .store()
            .events(&sid)
            .unwrap()
            .iter()
            .filter(|e| e.kind == EventKind::Message && e.speaker_id.is_some())
            .map(|e| e.content().unwrap().to_string())
            .collect();
        if contents.len() >= 2 {
            break;
        }
    }
    assert_eq!(contents, ["water first", "then the mirror"]);
}

#[tokio::test]
async fn slack_routes_are_absent_without_configuration() {
    let h = harness();
    let body = json!({ "type": "url_verification", "challenge": "x" }).to_string();
    assert_eq!(
        h.send(slack_request(&body, START as i64, SECRET)).await.status,
        StatusCode::NOT_FOUND
    );
    let exp = h.open_experiment(config(2)).await;
    let r = h
        .call(
            "POST",
            &format!("/v1/experiments/{exp}/sessions"),
            Some(json!({ "team": team(), "platform": "slack", "channel_id": "C1" })),
        )
        .await;
    assert_eq!(r.status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn file_backed_logs_survive_a_restart() {
    let dir = tempfile::tempdir().unwrap();
    let toml = format!("data_dir = {:?}", dir.path());
    let sid = {
        let h = harness_with(&toml, &[]);
        let exp = h.open_experiment(config(2)).await;
        let sid = h.start(&exp, team()).await["session_id"].as_str().unwrap().to_string();
        h.say(&sid, "p1", "water first").await;
        h.call("POST", &format!("/v1/sessions/{sid}/stop"), None).await;
        sid
    };
    let h = harness_with(&toml, &[]);
    let listed = h.call("GET", "/v1/sessions", None).await.json();
    assert_eq!(listed[0]["session_id"], sid.as_str());
    assert_eq!(listed[0]["status"], "archived");
    let transcript = h
        .call("GET", &format!("/v1/sessions/{sid}/export?format=transcript"), None)
        .await;
    assert!(transcript.text().contains("Ann: water first"));
}
