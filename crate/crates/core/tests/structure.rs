//! Every encoder with every decoder: validation, execution, strides, taps.

use segbench_core::engine::{Executor, ModelParams, Tensor};
use segbench_core::graph::{
    effective_stride, infer_shapes, receptive_field, validate_graph, GraphBuilder, LayerSpec, TensorShape,
};
use segbench_core::meta_arch::{build_model, DecoderKind, DEFAULT_NUM_CLASSES};
use segbench_core::zoo::{apply_dilation_conversion, build_encoder, EncoderKind, EncoderOptions};

#[test]
fn all_twelve_models_validate_and_run_at_full_resolution() {
    let opts = EncoderOptions::default();
    let input = Tensor::filled(&[1, 3, 64, 128], 0.1);
    for enc in EncoderKind::ALL {
        for dec in DecoderKind::ALL {
            let m = build_model(enc, dec, &opts, DEFAULT_NUM_CLASSES).unwrap();
            let report = validate_graph(&m.graph);
            assert!(report.is_valid(), "{}: {report:?}", m.id());
            let params = ModelParams::for_model(&m, 0).unwrap();
            let out = Executor::new(&m.graph).unwrap().infer(&params, std::slice::from_ref(&input)).unwrap();
            assert_eq!(out[0].shape(), &[1, 20, 64, 128], "{}", m.id());
            assert!(out[0].all_finite(), "{}", m.id());
        }
    }
}

#[test]
fn encoder_strides_and_taps() {
    for enc in EncoderKind::ALL {
        let d = build_encoder(enc, &EncoderOptions::default()).unwrap();
        assert_eq!(effective_stride(&d.graph, &d.output).unwrap(), 32, "{enc}");
        let shapes = infer_shapes(&d.graph, &[TensorShape::new(1, 3, 64, 128)]).unwrap();
        for (&stride, tap) in &d.taps {
            assert_eq!(effective_stride(&d.graph, &tap.node).unwrap(), stride, "{enc} tap {stride}");
            assert_eq!(shapes[&tap.node].channels, tap.channels, "{enc} tap {stride}");
        }
        let converted = apply_dilation_conversion(&d).unwrap();
        assert_eq!(effective_stride(&converted.graph, &converted.output).unwrap(), 8, "{enc}");
        let rf_converted = receptive_field(&converted.graph, &converted.output).unwrap();
        let rf_tap8 = receptive_field(&d.graph, &d.taps[&8].node).unwrap();
        assert!(rf_converted.0 >= rf_tap8.0 && rf_converted.1 >= rf_tap8.1, "{enc}");
    }
}

#[test]
fn width_and_group_variants_keep_tap_channels_consistent() {
    for (kind, opts) in [
        (EncoderKind::MobileNet, EncoderOptions { width_multiplier: 0.25, ..Default::default() }),
        (EncoderKind::MobileNet, EncoderOptions { width_multiplier: 0.5, ..Default::default() }),
        (EncoderKind::ShuffleNet, EncoderOptions { groups: 1, ..Default::default() }),
        (EncoderKind::ShuffleNet, EncoderOptions { groups: 2, ..Default::default() }),
        (EncoderKind::ShuffleNet, EncoderOptions { groups: 4, ..Default::default() }),
        (EncoderKind::ShuffleNet, EncoderOptions { groups: 8, ..Default::default() }),
        (EncoderKind::Vgg16, EncoderOptions { vgg_batchnorm: false, ..Default::default() }),
    ] {
        let d = build_encoder(kind, &opts).unwrap();
        assert!(validate_graph(&d.graph).is_valid());
        let shapes = infer_shapes(&d.graph, &[TensorShape::new(1, 3, 64, 128)]).unwrap();
        for tap in d.taps.values() {
            assert_eq!(shapes[&tap.node].channels, tap.channels, "{kind} {opts:?}");
        }
    }
}

#[test]
fn inferred_shapes_match_execution_for_every_layer_kind() {
    let mut b = GraphBuilder::new();
    let x = b.input("x", 6);
    let c = b.push("c", LayerSpec::conv(6, 3, 2, 1), &[&x]).unwrap();
    let g = b.push("g", LayerSpec::grouped_conv(6, 3, 1, 2, 3).with_dilation(2), &[&c]).unwrap();
    let dw = b.push("dw", LayerSpec::depthwise(6, 3, 1, 1), &[&g]).unwrap();
    let bn = b.push("bn", LayerSpec::batchnorm(), &[&dw]).unwrap();
    let r = b.push("r", LayerSpec::relu(), &[&bn]).unwrap();
    let mp = b.push("mp", LayerSpec::max_pool(2, 2, 0), &[&r]).unwrap();
    let ap = b.push("ap", LayerSpec::avg_pool(3, 2, 1), &[&r]).unwrap();
    let add = b.push("add", LayerSpec::add(), &[&mp, &ap]).unwrap();
    let cat = b.push("cat", LayerSpec::concat(), &[&add, &mp]).unwrap();
    let sh = b.push("sh", LayerSpec::channel_shuffle(4), &[&cat]).unwrap();
    let up = b.push("up", LayerSpec::transposed_conv(5, 4, 2, 1), &[&sh]).unwrap();
    let rs = b.push("rs", LayerSpec::bilinear_resize(2), &[&up]).unwrap();
    let gp = b.push("gp", LayerSpec::global_pool(), &[&rs]).unwrap();
    let graph = b.finish(&[&c, &g, &dw, &bn, &r, &mp, &ap, &add, &cat, &sh, &up, &rs, &gp]);
    let input = TensorShape::new(2, 6, 16, 12);
    let shapes = infer_shapes(&graph, &[input]).unwrap();
    let params = ModelParams::init(&graph, 3).unwrap();
    let ex = Executor::new(&graph).unwrap();
    let outs = ex.infer(&params, &[Tensor::from_shape(input)]).unwrap();
    for (id, t) in graph.outputs().iter().zip(&outs) {
        let s = shapes[id];
        assert_eq!(t.shape(), &[s.batch, s.channels, s.height, s.width], "{id}");
    }
}

#[test]
fn skipnet_parameters_do_not_depend_on_resolution() {
    use segbench_core::cost::network_cost;
    for enc in EncoderKind::ALL {
        let m = build_model(enc, DecoderKind::SkipNet, &EncoderOptions::default(), DEFAULT_NUM_CLASSES).unwrap();
        let a = network_cost("a", &m.graph, TensorShape::new(1, 3, 64, 128)).unwrap();
        let b = network_cost("b", &m.graph, TensorShape::new(1, 3, 360, 640)).unwrap();
        assert_eq!(a.totals.params, b.totals.params);
        let init = ModelParams::for_model(&m, 0).unwrap();
        assert_eq!(init.num_parameters() as u64, a.totals.params);
    }
}
