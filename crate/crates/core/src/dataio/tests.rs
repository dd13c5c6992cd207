use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geometry::{self, unoriented_angle_deg};

fn unit_square() -> TriangleMesh {
    TriangleMesh::new(
        vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]],
        vec![[0, 1, 2], [0, 2, 3]],
    )
    .unwrap()
}

fn icosphere(levels: usize) -> TriangleMesh {
    let t = (1.0 + 5f64.sqrt()) / 2.0;
    let mut v: Vec<Vec3> = vec![
        [-1.0, t, 0.0],
        [1.0, t, 0.0],
        [-1.0, -t, 0.0],
        [1.0, -t, 0.0],
        [0.0, -1.0, t],
        [0.0, 1.0, t],
        [0.0, -1.0, -t],
        [0.0, 1.0, -t],
        [t, 0.0, -1.0],
        [t, 0.0, 1.0],
        [-t, 0.0, -1.0],
        [-t, 0.0, 1.0],
    ];
    let mut f: Vec<[usize; 3]> = vec![
        [0, 11, 5],
        [0, 5, 1],
        [0, 1, 7],
        [0, 7, 10],
        [0, 10, 11],
        [1, 5, 9],
        [5, 11, 4],
        [11, 10, 2],
        [10, 7, 6],
        [7, 1, 8],
        [3, 9, 4],
        [3, 4, 2],
        [3, 2, 6],
        [3, 6, 8],
        [3, 8, 9],
        [4, 9, 5],
        [2, 4, 11],
        [6, 2, 10],
        [8, 6, 7],
        [9, 8, 1],
    ];
    for p in &mut v {
        *p = geometry::normalize(*p).unwrap();
    }
    for _ in 0..levels {
        let mut next = Vec::new();
        let mut mid = std::collections::HashMap::new();
        let mut midpoint = |a: usize, b: usize, v: &mut Vec<Vec3>| -> usize {
            *mid.entry((a.min(b), a.max(b))).or_insert_with(|| {
                let m = geometry::normalize(geometry::scale(geometry::add(v[a], v[b]), 0.5)).unwrap();
                v.push(m);
                v.len() - 1
            })
        };
        for [a, b, c] in f {
            let ab = midpoint(a, b, &mut v);
            let bc = midpoint(b, c, &mut v);
            let ca = midpoint(c, a, &mut v);
            next.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]);
        }
        f = next;
    }
    TriangleMesh::new(v, f).unwrap()
}

#[test]
fn planar_mesh_normals() {
    let s = sample_mesh_surfels(&unit_square(), 500, 3).unwrap();
    for (p, n) in s.positions().points().iter().zip(s.normals().normals()) {
        assert_eq!(n[0], 0.0);
        assert_eq!(n[1], 0.0);
        assert_eq!(n[2].abs(), 1.0);
        assert_eq!(p[2], 0.0);
        assert!((0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]));
    }
}

#[test]
fn area_weighted_face_choice() {
    // Areas 1 and 3, separated in x so the face is recoverable from a sample.
    let mesh = TriangleMesh::new(
        vec![
            [0.0, 0.0, 0.0],
            [2.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [10.0, 0.0, 0.0],
            [12.0, 0.0, 0.0],
            [10.0, 3.0, 0.0],
        ],
        vec![[0, 1, 2], [3, 4, 5]],
    )
    .unwrap();
    assert_eq!(mesh.face_area(0), 1.0);
    assert_eq!(mesh.face_area(1), 3.0);
    let s = sample_mesh_surfels(&mesh, 40000, 7).unwrap();
    let big = s.positions().points().iter().filter(|p| p[0] >= 5.0).count() as f64 / 40000.0;
    assert!((big - 0.75).abs() <= 0.01, "{big}");
}

#[test]
fn samples_lie_on_their_face_planes() {
    let mesh = icosphere(1);
    let s = sample_mesh_surfels(&mesh, 2000, 1).unwrap();
    for (p, n) in s.positions().points().iter().zip(s.normals().normals()) {
        let best = (0..mesh.faces().len())
            .map(|f| {
                let [a, ..] = mesh.triangle(f);
                geometry::dot(geometry::sub(*p, a), *n).abs()
            })
            .fold(f64::INFINITY, f64::min);
        assert!(best < 1e-9);
    }
}

#[test]
fn icosphere_normals_are_near_radial() {
    let s = sample_mesh_surfels(&icosphere(2), 1024, 5).unwrap();
    for (p, n) in s.positions().points().iter().zip(s.normals().normals()) {
        assert!(unoriented_angle_deg(*p, *n) < 25.0);
    }
}

#[test]
fn degenerate_meshes() {
    let flat = TriangleMesh::new(vec![[0.0; 3], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0]], vec![[0, 1, 2]]).unwrap();
    assert_eq!(flat.degenerate_faces(), 1);
    assert!(matches!(sample_mesh_surfels(&flat, 10, 0), Err(Error::Data(_))));
    assert!(TriangleMesh::new(vec![[0.0; 3]], vec![[0, 0, 1]]).is_err());
    let s = sample_mesh_surfels(&unit_square(), 10, 9).unwrap();
    assert_eq!(s, sample_mesh_surfels(&unit_square(), 10, 9).unwrap());
}

#[test]
fn unit_sphere_samples() {
    let spec = ShapeSpec {
        shape: Shape::Sphere { radius: 2.5 },
        label: 0,
    };
    let s = synth_shape(&spec, 1000, 4).unwrap();
    for (p, n) in s.positions().points().iter().zip(s.normals().normals()) {
        assert!((geometry::norm(*p) - 1.0).abs() < 1e-9);
        assert_eq!(p, n);
    }
}

#[test]
fn box_normals_are_axes() {
    let spec = ShapeSpec {
        shape: Shape::Box {
            extents: [1.0, 2.0, 0.5],
        },
        label: 1,
    };
    let s = synth_shape(&spec, 1000, 4).unwrap();
    for n in s.normals().normals() {
        let ones = n.iter().filter(|v| v.abs() == 1.0).count();
        let zeros = n.iter().filter(|&&v| v == 0.0).count();
        assert_eq!((ones, zeros), (1, 2));
    }
    let max = s.positions().points().iter().map(|&p| geometry::norm(p)).fold(0.0, f64::max);
    assert!(max <= 1.0 + 1e-12);
}

fn numeric_gradient(f: impl Fn(Vec3) -> f64, p: Vec3) -> Vec3 {
    let h = 1e-6;
    let mut g = [0.0; 3];
    for a in 0..3 {
        let (mut hi, mut lo) = (p, p);
        hi[a] += h;
        lo[a] -= h;
        g[a] = (f(hi) - f(lo)) / (2.0 * h);
    }
    geometry::normalize(g).unwrap()
}

#[test]
fn torus_normals_match_implicit_gradient() {
    let (major, minor) = (1.0, 0.3);
    let spec = ShapeSpec {
        shape: Shape::Torus { major, minor },
        label: 0,
    };
    let s = synth_shape(&spec, 2048, 8).unwrap();
    // Undo the unit-radius scaling to evaluate the implicit surface.
    let k = major + minor;
    let f = |p: Vec3| ((p[0] * p[0] + p[1] * p[1]).sqrt() - major).powi(2) + p[2] * p[2] - minor * minor;
    for (p, n) in s.positions().points().iter().zip(s.normals().normals()) {
        let p = geometry::scale(*p, k);
        assert!(f(p).abs() < 1e-9);
        let g = numeric_gradient(f, p);
        assert!(geometry::dot(g, *n) > 1.0 - 1e-8, "{g:?} vs {n:?}");
    }
}

#[test]
fn cylinder_and_cone_normals_match_implicit_gradient() {
    let (r, h) = (0.6, 1.5);
    let cyl = synth_shape(
        &ShapeSpec {
            shape: Shape::Cylinder { radius: r, height: h },
            label: 0,
        },
        1000,
        2,
    )
    .unwrap();
    let k = (r * r + h * h / 4.0).sqrt();
    for (p, n) in cyl.positions().points().iter().zip(cyl.normals().normals()) {
        let p = geometry::scale(*p, k);
        if n[2] == 0.0 {
            let g = numeric_gradient(|q| q[0] * q[0] + q[1] * q[1], p);
            assert!(geometry::dot(g, *n) > 1.0 - 1e-8);
        } else {
            assert!((p[2].abs() - h / 2.0).abs() < 1e-12 && (p[0].hypot(p[1])) <= r + 1e-12);
        }
    }
    let cone = synth_shape(
        &ShapeSpec {
            shape: Shape::Cone { radius: r, height: h },
            label: 0,
        },
        1000,
        2,
    )
    .unwrap();
    for (p, n) in cone.positions().points().iter().zip(cone.normals().normals()) {
        let p = geometry::scale(*p, k);
        let z = p[2] + h / 2.0;
        if n[2] == -1.0 {
            assert!(z.abs() < 1e-12);
        } else {
            // Lateral surface: rho = r (1 - z/h).
            let f = |q: Vec3| q[0].hypot(q[1]) - r * (1.0 - (q[2] + h / 2.0) / h);
            assert!(f(p).abs() < 1e-12);
            let g = numeric_gradient(f, p);
            assert!(geometry::dot(g, *n) > 1.0 - 1e-8);
        }
    }
}

#[test]
fn shape_specs_validate() {
    assert!(matches!(Shape::from_parts("pyramid", &[1.0]), Err(Error::InvalidArgument(_))));
    assert!(Shape::from_parts("box", &[1.0, 2.0]).is_err());
    assert!(Shape::from_parts("sphere", &[-1.0]).is_err());
    assert!(Shape::from_parts("torus", &[0.2, 0.5]).is_err());
    assert_eq!(
        Shape::from_parts("cone", &[1.0, 2.0]).unwrap(),
        Shape::Cone {
            radius: 1.0,
            height: 2.0
        }
    );
}

#[test]
fn augmentation() {
    let cloud = SurfelCloud::from_vecs(vec![[0.0, 0.0, 1.0]], vec![[0.0, 0.0, 1.0]]).unwrap();
    let id = AugmentConfig {
        scale_range: [1.0, 1.0],
        translate_range: 0.0,
    };
    assert_eq!(augment(&cloud, &id, 3).unwrap(), cloud);
    let moved = apply_affine(&cloud, 2.0, [1.0, 0.0, 0.0]).unwrap();
    assert_eq!(moved.positions().points(), &[[1.0, 0.0, 2.0]]);
    assert_eq!(moved.normals().normals(), &[[0.0, 0.0, 1.0]]);

    let cfg = AugmentConfig {
        scale_range: [0.8, 1.2],
        translate_range: 0.0,
    };
    let mean: f64 = (0..1000)
        .map(|seed| augment(&cloud, &cfg, seed).unwrap().positions().points()[0][2])
        .sum::<f64>()
        / 1000.0;
    assert!((mean - 1.0).abs() <= 0.02, "{mean}");
    assert!(AugmentConfig {
        scale_range: [1.2, 0.8],
        translate_range: 0.0
    }
    .validate()
    .is_err());
}

fn random_surfels(n: usize, seed: u64) -> SurfelCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v = || [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
    let pos: Vec<Vec3> = (0..n).map(|_| v()).collect();
    let nrm: Vec<Vec3> = (0..n).map(|_| geometry::normalize(v()).unwrap()).collect();
    SurfelCloud::from_vecs(pos, nrm).unwrap()
}

fn max_diff(a: &SurfelCloud, b: &SurfelCloud) -> f64 {
    let pa = a.positions().points().iter().chain(a.normals().normals());
    let pb = b.positions().points().iter().chain(b.normals().normals());
    pa.zip(pb)
        .flat_map(|(x, y)| (0..3).map(move |i| (x[i] - y[i]).abs()))
        .fold(0.0, f64::max)
}

#[test]
fn point_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cloud = random_surfels(100, 1);
    for ext in ["xyzn", "ply"] {
        let path = dir.path().join(format!("c.{ext}"));
        write_surfel_file(&path, &cloud).unwrap();
        let back = read_surfel_file(&path).unwrap();
        assert!(max_diff(&cloud, &back) < 1e-9, "{ext}");
    }
    let path = dir.path().join("p.xyz");
    write_point_file(&path, cloud.positions().points(), None).unwrap();
    let back = read_point_file(&path).unwrap();
    assert!(matches!(back, PointData::Points(_)));
    assert!(matches!(read_surfel_file(&path), Err(Error::Data(_))));
}

#[test]
fn point_file_errors() {
    assert!(matches!(parse_xyz("", "e"), Err(Error::Parse { .. })));
    assert!(matches!(parse_xyz("# only comment\n\n", "e"), Err(Error::Parse { .. })));
    match parse_xyz("1 2 3\n4 five 6\n", "f") {
        Err(Error::Parse { location, .. }) => assert_eq!(location, "f:2"),
        other => panic!("{other:?}"),
    }
    assert!(matches!(parse_xyz("1 2 3\n4 nan 6\n", "f"), Err(Error::Data(_))));
    assert!(matches!(parse_xyz("1 2 inf\n", "f"), Err(Error::Data(_))));
    assert!(parse_xyz("1 2 3\n1 2 3 0 0 1\n", "f").is_err());

    let ply = "ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\nproperty float y\nproperty float z\nend_header\n0 0 0\n1 1 1\n";
    let pts = parse_ply(ply, "p").unwrap();
    assert_eq!(pts.positions().len(), 2);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("n.ply");
    std::fs::write(&path, ply).unwrap();
    match read_surfel_file(&path) {
        Err(Error::Data(msg)) => assert!(msg.contains("nx")),
        other => panic!("{other:?}"),
    }
    assert!(parse_ply("ply\nformat binary_little_endian 1.0\nend_header\n", "b").is_err());
    assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 2\nproperty float x\n", "h").is_err());
}

#[test]
fn ply_skips_faces_and_keeps_extra_properties() {
    let text = "ply\nformat ascii 1.0\ncomment x\nelement vertex 3\nproperty float x\nproperty float y\nproperty float z\nproperty float quality\nelement face 1\nproperty list uchar int vertex_indices\nend_header\n0 0 0 5\n1 0 0 5\n0 1 0 5\n3 0 1 2\n";
    assert_eq!(parse_ply(text, "m").unwrap().positions().len(), 3);
    let out = format_ply(
        &[[0.0; 3], [1.0, 2.0, 3.0]],
        None,
        &[ExtraProperty {
            name: "err",
            values: &[0.5, 45.0],
        }],
    )
    .unwrap();
    assert!(out.contains("property double err\nend_header"));
    assert!(parse_ply(&out, "o").is_ok());
}

#[test]
fn mesh_readers() {
    let off = parse_off("OFF\n# tri\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", "t").unwrap();
    assert_eq!(off.faces(), &[[0, 1, 2]]);
    let compact = parse_off("OFF3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 2\n", "t").unwrap();
    assert_eq!(compact, off);
    match parse_off("OFF\n3 1 0\n0 0 0\n1 0 0\n0 1 0\n3 0 1 7\n", "t") {
        Err(Error::Parse { message, .. }) => assert!(message.contains("face 0")),
        other => panic!("{other:?}"),
    }

    let obj = "# quad\nv 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1 4//1\n";
    let quad = parse_obj(obj, "q").unwrap();
    assert_eq!(quad.faces(), &[[0, 1, 2], [0, 2, 3]]);
    let tri = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n", "t").unwrap();
    assert_eq!(tri.faces(), &[[0, 1, 2]]);
    let neg = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf -3 -2 -1\n", "t").unwrap();
    assert_eq!(neg.faces(), &[[0, 1, 2]]);
    match parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\nf 1 2 9\n", "t") {
        Err(Error::Parse { message, .. }) => assert!(message.contains("face 1")),
        other => panic!("{other:?}"),
    }
    assert!(parse_obj("v 0 nan 0\n", "t").is_err());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.obj");
    std::fs::write(&path, obj).unwrap();
    assert_eq!(read_mesh_file(&path).unwrap(), quad);
    assert!(read_mesh_file(&dir.path().join("m.stl")).is_err());
}

fn small_config() -> DataConfig {
    DataConfig {
        samples_per_class: 10,
        points: 256,
        seed: 5,
        ..DataConfig::default()
    }
}

#[test]
fn dataset_split_and_determinism() {
    let cfg = DataConfig {
        samples_per_class: 100,
        points: 64,
        ..small_config()
    };
    let d = build_dataset(&cfg).unwrap();
    assert_eq!((d.train.len(), d.test.len()), (400, 100));
    assert_eq!(d.num_classes(), 5);
    let key = |s: &Sample| s.surfels.positions().points()[0].map(f64::to_bits);
    let train: HashSet<_> = d.train.iter().map(key).collect();
    assert!(d.test.iter().all(|s| !train.contains(&key(s))));
    assert_eq!(d, build_dataset(&cfg).unwrap());
    for s in d.train.iter().chain(&d.test) {
        let r = s.surfels.positions().points().iter().map(|&p| geometry::norm(p)).fold(0.0, f64::max);
        assert!(r <= 1.0 + 1e-12);
    }
}

#[test]
fn estimated_normals_on_spheres() {
    let cfg = DataConfig {
        classes: vec![ShapeKind::Sphere],
        samples_per_class: 2,
        points: 1024,
        split: 0.5,
        normal_source: NormalSource::Estimated,
        ..small_config()
    };
    let d = build_dataset(&cfg).unwrap();
    let gt = build_dataset(&DataConfig {
        normal_source: NormalSource::GroundTruth,
        ..cfg.clone()
    })
    .unwrap();
    for (e, g) in d.train.iter().zip(&gt.train) {
        assert_eq!(e.surfels.positions(), g.surfels.positions());
        assert_ne!(e.surfels.normals(), g.surfels.normals());
        let mean = e
            .surfels
            .positions()
            .points()
            .iter()
            .zip(e.surfels.normals().normals())
            .map(|(p, n)| unoriented_angle_deg(*p, *n))
            .sum::<f64>()
            / 1024.0;
        assert!(mean < 10.0, "{mean}");
    }
}

#[test]
fn mesh_directory_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a_plane");
    let b = dir.path().join("b_tet");
    std::fs::create_dir_all(&a).unwrap();
    std::fs::create_dir_all(&b).unwrap();
    std::fs::write(a.join("q.obj"), "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n").unwrap();
    std::fs::write(
        b.join("t.off"),
        "OFF\n4 4 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 2 1\n3 0 1 3\n3 0 3 2\n3 1 2 3\n",
    )
    .unwrap();
    let cfg = DataConfig {
        mesh_dir: Some(dir.path().to_path_buf()),
        samples_per_class: 4,
        points: 50,
        split: 0.5,
        ..small_config()
    };
    let d = build_dataset(&cfg).unwrap();
    assert_eq!(d.class_names, vec!["a_plane".to_string(), "b_tet".to_string()]);
    assert_eq!((d.train.len(), d.test.len()), (4, 4));

    std::fs::create_dir_all(dir.path().join("c_empty")).unwrap();
    assert!(matches!(build_dataset(&cfg), Err(Error::Data(_))));
}

#[test]
fn data_config_text_round_trip() {
    let mut cfg = DataConfig::default();
    cfg.apply("classes", "torus, cone").unwrap();
    cfg.apply("normal_source", "estimated").unwrap();
    let mut back = DataConfig::default();
    for (k, v) in cfg.pairs() {
        back.apply(k, &v).unwrap();
    }
    assert_eq!(back, cfg);
    assert!(cfg.apply("classes", "sphere,blob").is_err());
    assert!(cfg.apply("nope", "1").is_err());
    assert!(matches!(
        build_dataset(&DataConfig {
            samples_per_class: 0,
            ..DataConfig::default()
        }),
        Err(Error::Data(_))
    ));
}
