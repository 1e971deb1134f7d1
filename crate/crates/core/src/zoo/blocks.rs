//! Primitive blocks shared by the encoders.

use crate::graph::{GraphBuilder, GraphError, LayerSpec, NodeId};

/// `layer` followed by optional batchnorm and relu. The conv bias is dropped
/// when batchnorm follows.
pub fn conv_bn_relu(
    b: &mut GraphBuilder,
    name: &str,
    input: &NodeId,
    layer: LayerSpec,
    batchnorm: bool,
    relu: bool,
) -> Result<NodeId, GraphError> {
    let mut cur = b.push(name, layer.with_bias(!batchnorm), &[input])?;
    if batchnorm {
        cur = b.push(&format!("{name}_bn"), LayerSpec::batchnorm(), &[&cur])?;
    }
    if relu {
        cur = b.push(&format!("{name}_relu"), LayerSpec::relu(), &[&cur])?;
    }
    Ok(cur)
}

/// Depthwise 3x3 (+bn+relu) followed by pointwise 1x1 (+bn+relu).
pub fn depthwise_separable(
    b: &mut GraphBuilder,
    name: &str,
    input: &NodeId,
    out_channels: usize,
    stride: usize,
) -> Result<NodeId, GraphError> {
    let in_channels = b
        .channels(input)
        .ok_or_else(|| GraphError::UnknownNode(input.clone()))?;
    let dw = conv_bn_relu(
        b,
        &format!("{name}/dw"),
        input,
        LayerSpec::depthwise(in_channels, 3, stride, 1),
        true,
        true,
    )?;
    conv_bn_relu(
        b,
        &format!("{name}/pw"),
        &dw,
        LayerSpec::conv(out_channels, 1, 1, 0),
        true,
        true,
    )
}

/// ResNet basic block: two 3x3 convs with a residual add. A 1x1 projection
/// (+bn) replaces the identity shortcut when the stride or width changes.
pub fn basic_block(
    b: &mut GraphBuilder,
    name: &str,
    input: &NodeId,
    out_channels: usize,
    stride: usize,
) -> Result<NodeId, GraphError> {
    let in_channels = b
        .channels(input)
        .ok_or_else(|| GraphError::UnknownNode(input.clone()))?;
    let a = conv_bn_relu(
        b,
        &format!("{name}/conv1"),
        input,
        LayerSpec::conv(out_channels, 3, stride, 1),
        true,
        true,
    )?;
    let c = conv_bn_relu(
        b,
        &format!("{name}/conv2"),
        &a,
        LayerSpec::conv(out_channels, 3, 1, 1),
        true,
        false,
    )?;
    let shortcut = if stride != 1 || in_channels != out_channels {
        conv_bn_relu(
            b,
            &format!("{name}/proj"),
            input,
            LayerSpec::conv(out_channels, 1, stride, 0),
            true,
            false,
        )?
    } else {
        input.clone()
    };
    let sum = b.push(&format!("{name}/add"), LayerSpec::add(), &[&c, &shortcut])?;
    b.push(&format!("{name}/relu"), LayerSpec::relu(), &[&sum])
}

/// ShuffleNet unit.
///
/// grouped 1x1 -> bn -> relu -> channel shuffle -> depthwise 3x3 -> bn ->
/// grouped 1x1 -> bn, then a residual add (stride 1) or a concat with a 3x3
/// average-pooled shortcut (stride 2), then relu. With stride 2 the branch
/// produces `out_channels - in_channels` channels so the concat yields
/// `out_channels`. `first_groups` overrides the group count of the first 1x1.
pub fn shuffle_unit(
    b: &mut GraphBuilder,
    name: &str,
    input: &NodeId,
    out_channels: usize,
    groups: usize,
    stride: usize,
    first_groups: usize,
) -> Result<NodeId, GraphError> {
    let in_channels = b
        .channels(input)
        .ok_or_else(|| GraphError::UnknownNode(input.clone()))?;
    let bottleneck = out_channels / 4;
    let branch_out = if stride == 1 {
        out_channels
    } else {
        out_channels.checked_sub(in_channels).filter(|&c| c > 0).ok_or_else(|| {
            GraphError::InvalidLayer(format!(
                "{name}: strided unit needs out_channels > in_channels ({out_channels} <= {in_channels})"
            ))
        })?
    };
    let g1 = conv_bn_relu(
        b,
        &format!("{name}/gconv1"),
        input,
        LayerSpec::grouped_conv(bottleneck, 1, 1, 0, first_groups),
        true,
        true,
    )?;
    let sh = b.push(&format!("{name}/shuffle"), LayerSpec::channel_shuffle(groups), &[&g1])?;
    let dw = conv_bn_relu(
        b,
        &format!("{name}/dw"),
        &sh,
        LayerSpec::depthwise(bottleneck, 3, stride, 1),
        true,
        false,
    )?;
    let g2 = conv_bn_relu(
        b,
        &format!("{name}/gconv2"),
        &dw,
        LayerSpec::grouped_conv(branch_out, 1, 1, 0, groups),
        true,
        false,
    )?;
    let merged = if stride == 1 {
        if in_channels != out_channels {
            return Err(GraphError::InvalidLayer(format!(
                "{name}: residual unit needs in == out channels ({in_channels} != {out_channels})"
            )));
        }
        b.push(&format!("{name}/add"), LayerSpec::add(), &[&g2, input])?
    } else {
        let pool = b.push(
            &format!("{name}/shortcut_pool"),
            LayerSpec::avg_pool(3, stride, 1),
            &[input],
        )?;
        b.push(&format!("{name}/concat"), LayerSpec::concat(), &[&pool, &g2])?
    };
    b.push(&format!("{name}/relu"), LayerSpec::relu(), &[&merged])
}
