use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ecakp_core::container::{pack, unpack, PackagingSecret};
use ecakp_core::identity::{self, AttributeSet, EXPECTED_ATTRIBUTES};
use ecakp_core::licensing::{self, ServerKey};
use ecakp_core::server::{decide, ActivationRecord, Outcome, PolicyMode};
use ecakp_core::ContentId;

fn media(len: usize) -> Vec<u8> {
    (0..len).map(|i| (i as u32).wrapping_mul(2_654_435_761).to_le_bytes()[i % 3]).collect()
}

fn attrs(tag: u32) -> AttributeSet {
    AttributeSet::new(EXPECTED_ATTRIBUTES.iter().map(|n| (*n, Some(format!("{n}-{tag}"))))).unwrap()
}

fn container(c: &mut Criterion) {
    let mut g = c.benchmark_group("container");
    let id = ContentId::from_bytes([1; 16]);
    let secret = PackagingSecret::from_seed([2; 32], id);
    for len in [64 * 1024, 1 << 20, 8 << 20] {
        let data = media(len);
        g.throughput(Throughput::Bytes(len as u64));
        g.bench_with_input(BenchmarkId::new("pack", len), &data, |b, d| {
            b.iter(|| pack(black_box(d.as_slice()), id, &secret).unwrap())
        });
        let sealed = pack(data.as_slice(), id, &secret).unwrap();
        g.bench_with_input(BenchmarkId::new("unpack", len), &sealed, |b, s| {
            b.iter(|| unpack(black_box(s), secret.master_key()).unwrap())
        });
    }
    g.finish();
}

fn identity_and_license(c: &mut Criterion) {
    let a = attrs(1);
    c.bench_function("fingerprint", |b| b.iter(|| identity::fingerprint(black_box(&a))));

    let key = ServerKey::from_seed([3; 32]);
    let fp = identity::fingerprint(&a);
    let id = ContentId::from_bytes([4; 16]);
    c.bench_function("issue_license", |b| b.iter(|| licensing::issue_license(id, &fp, &[5; 32], &key)));
    let lic = licensing::issue_license(id, &fp, &[5; 32], &key);
    let public = key.public_key();
    c.bench_function("unwrap_content_key", |b| {
        b.iter(|| licensing::unwrap_content_key(black_box(&lic), &public, &a, 2).unwrap())
    });
}

fn policy(c: &mut Criterion) {
    let mut g = c.benchmark_group("decide");
    for n in [10usize, 1_000, 100_000] {
        let history: Vec<ActivationRecord> = (0..n as u32)
            .map(|i| ActivationRecord::new(identity::fingerprint(&attrs(i % 50)).digest, vec![], "s@x.edu", 0, Outcome::Granted))
            .collect();
        let probe = identity::fingerprint(&attrs(99_999)).digest;
        for mode in [PolicyMode::FairUse { extra_activations: 1 }, PolicyMode::MassiveFraudPrevention { threshold: 5 }] {
            g.bench_with_input(BenchmarkId::new(mode.to_string(), n), &history, |b, h| {
                b.iter(|| decide(&mode, black_box(h), &probe))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, container, identity_and_license, policy);
criterion_main!(benches);
