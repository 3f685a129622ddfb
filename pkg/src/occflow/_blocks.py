"""Shared decoder building blocks: dense flow estimator and context network.

Both the pyramid flow network and the appearance-flow net assemble their
decoders from these. All convolutions are 3x3 with same padding and
LeakyReLU(0.1) activations; flow heads are linear.
"""

from .diffcore import ConvLayer, Tensor, add, concat, leaky_relu


def _zero_head(layer):
    # flow heads start at zero so a fresh pyramid emits the zero field;
    # residual learning then starts inside the photometric basin instead
    # of fighting large random flows
    layer.kernel.data[:] = 0.0
    layer.bias.data[:] = 0.0
    return layer


class DenseFlowEstimator:
    """Densely connected conv stack with a 2-channel flow head.

    Layer i sees the block input concatenated with every earlier layer's
    output. Returns (last_features, flow_residual); the head reads the full
    concatenation.
    """

    def __init__(self, in_ch, widths, rng=None):
        self.widths = tuple(widths)
        self.layers = []
        ch = in_ch
        for w in self.widths:
            self.layers.append(ConvLayer(ch, w, 3, rng=rng))
            ch += w
        self.head = _zero_head(ConvLayer(ch, 2, 3, rng=rng))

    def __call__(self, x):
        feats = x
        last = x
        for layer in self.layers:
            last = leaky_relu(layer(feats))
            feats = concat([feats, last], axis=1)
        return last, self.head(feats)

    def named_parameters(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"{prefix}dense{i}.")
        out += self.head.named_parameters(prefix + "head.")
        return out

    def param_count(self):
        return sum(t.size for _, t in self.named_parameters())


class ContextBlock:
    """Dilated conv stack producing a residual flow.

    Five 3x3 convs with dilations (1, 2, 4, 8, 16), then two plain convs,
    the last one a linear 2-channel head.
    """

    def __init__(self, in_ch, width, rng=None, dilations=(1, 2, 4, 8, 16)):
        self.layers = []
        ch = in_ch
        for d in dilations:
            self.layers.append(ConvLayer(ch, width, 3, dilation=d, rng=rng))
            ch = width
        self.layers.append(ConvLayer(ch, width, 3, rng=rng))
        self.head = _zero_head(ConvLayer(width, 2, 3, rng=rng))

    def __call__(self, x):
        for layer in self.layers:
            x = leaky_relu(layer(x))
        return self.head(x)

    def named_parameters(self, prefix=""):
        out = []
        for i, layer in enumerate(self.layers):
            out += layer.named_parameters(f"{prefix}conv{i}.")
        out += self.head.named_parameters(prefix + "head.")
        return out

    def param_count(self):
        return sum(t.size for _, t in self.named_parameters())


def estimate_residual(estimator, context, features, init_flow):
    """One decoder application: flow = init + estimator head + context.

    features already includes init_flow among its channels; the context
    block sees the estimator's last dense features next to the pre-context
    flow estimate.
    """
    last, res = estimator(features)
    flow = add(init_flow, res)
    ctx = context(concat([last, flow], axis=1))
    return add(flow, ctx)
