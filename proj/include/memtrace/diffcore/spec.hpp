#pragma once

#include <string>
#include <variant>
#include <vector>

namespace memtrace::diffcore {

struct ConvLayer {
    int out_channels = 0;
    int kernel = 3;
    int stride = 1;
    int pad = 1;
};
struct AffineLayer {
    int out_dim = 0;
};
struct ReluLayer {};
struct BatchNormLayer {};
struct MaxPoolLayer {
    int size = 2;  // window == stride
};
struct GlobalAvgPoolLayer {};

using LayerDesc = std::variant<ConvLayer, AffineLayer, ReluLayer, BatchNormLayer,
                               MaxPoolLayer, GlobalAvgPoolLayer>;

struct NoHead {};
struct ClassifierHead {
    int num_classes = 10;
};
struct ProjectionHead {
    int hidden_dim = 128;
    int out_dim = 128;
};
using HeadDesc = std::variant<NoHead, ClassifierHead, ProjectionHead>;

struct NetworkSpec {
    std::vector<LayerDesc> layers;
    int encoder_output_dim = 0;
    HeadDesc head = NoHead{};
    int in_channels = 3;
    int in_h = 32;
    int in_w = 32;
};

// Default desk-scale architecture:
// [conv3x3(16)-BN-relu-maxpool2] x3 -> global average pool -> affine(128)
inline NetworkSpec small_convnet(HeadDesc head) {
    NetworkSpec s;
    for (int i = 0; i < 3; ++i) {
        s.layers.push_back(ConvLayer{16, 3, 1, 1});
        s.layers.push_back(BatchNormLayer{});
        s.layers.push_back(ReluLayer{});
        s.layers.push_back(MaxPoolLayer{2});
    }
    s.layers.push_back(GlobalAvgPoolLayer{});
    s.layers.push_back(AffineLayer{128});
    s.encoder_output_dim = 128;
    s.head = head;
    return s;
}

}  // namespace memtrace::diffcore
