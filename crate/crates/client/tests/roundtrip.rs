use std::sync::Arc;

use visex_client::TriageClient;
use visex_core::api::{LabelRequest, RecomputeRequest};
use visex_core::cluster::{kmeans_fit, KMeansConfig};
use visex_core::corpus::export_corpus;
use visex_core::filter::FilterMode;
use visex_core::fixture::{generate_fixture, FixtureSpec};
use visex_core::triage::Verdict;
use visex_server::{serve, ServiceConfig, TriageState};

#[tokio::test]
async fn client_drives_a_triage_session() {
    let dir = tempfile::tempdir().unwrap();
    let fx = generate_fixture(&FixtureSpec {
        classes: 5,
        sentences_per_class: 8,
        dim: 6,
        latent_dim: 3,
        ..Default::default()
    })
    .unwrap();
    let model = kmeans_fit(&fx.corpus, &KMeansConfig { k: 4, ..Default::default() }).unwrap();
    let config = ServiceConfig::new(dir.path().join("c.jsonl"), dir.path().join("m.json"), dir.path().join("l.json"));
    export_corpus(&fx.corpus, &config.corpus).unwrap();
    model.save(&config.model).unwrap();

    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let base = format!("http://{}", listener.local_addr().unwrap());
    let state = Arc::new(TriageState::open(&config).unwrap());
    let (tx, rx) = tokio::sync::oneshot::channel::<()>();
    let server = tokio::spawn(serve(listener, state, async {
        let _ = rx.await;
    }));

    let client = TriageClient::new(&base).unwrap();
    let clusters = client.clusters().await.unwrap();
    assert_eq!(clusters.clusters.len(), 4);
    let rev = clusters.revision;

    let ack = client.label_cluster(1, Verdict::Visual, Some(rev)).await.unwrap();
    assert_eq!(ack.revision, rev + 1);
    let stale = client.label_cluster(1, Verdict::Nonvisual, Some(rev)).await.unwrap_err();
    assert!(stale.is_conflict(), "{stale}");
    let guarded = LabelRequest {
        cluster_model_id: Some("elsewhere".into()),
        ..LabelRequest::new(Verdict::Nonvisual)
    };
    assert!(client.label_cluster_with(1, &guarded).await.unwrap_err().is_conflict());

    let missing = client.label_cluster(4, Verdict::Visual, None).await.unwrap_err();
    assert!(missing.is_not_found() && missing.is_client_error());
    assert!(missing.to_string().contains("index out of range"));
    assert!(client.cluster(9).await.unwrap_err().is_not_found());

    client.label_section("Appearance", Verdict::Visual, None).await.unwrap();
    let sections = client.sections().await.unwrap();
    assert_eq!(sections.labeled, 1);
    let detail = client.cluster(1).await.unwrap();
    assert_eq!(detail.cluster.verdict, Verdict::Visual);
    assert_eq!(detail.cluster.exemplars.len(), detail.cluster.size);

    let labels = client.labels().await.unwrap();
    assert_eq!(labels.revision, rev + 2);
    let summary = client
        .recompute(&RecomputeRequest {
            mode: Some(FilterMode::VisSecClu),
            kind: None,
        })
        .await
        .unwrap();
    assert_eq!(summary.revision, labels.revision);
    assert_eq!(summary.representations, 5);
    assert!(summary.outputs.is_empty());

    tx.send(()).unwrap();
    server.await.unwrap().unwrap();
    // nothing listens any more
    assert!(matches!(client.labels().await.unwrap_err(), visex_client::ClientError::Transport(_)));
}
