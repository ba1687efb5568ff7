#include "mambaclip/tensor.hpp"

#include <sstream>

namespace mambaclip {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::string_view primitive_name(Primitive p) {
  switch (p) {
    case Primitive::leaf: return "leaf";
    case Primitive::matmul: return "matmul";
    case Primitive::add: return "add";
    case Primitive::mul: return "mul";
    case Primitive::sub: return "sub";
    case Primitive::div: return "div";
    case Primitive::exp: return "exp";
    case Primitive::log: return "log";
    case Primitive::softplus: return "softplus";
    case Primitive::silu: return "silu";
    case Primitive::tanh: return "tanh";
    case Primitive::power: return "power";
    case Primitive::sum: return "sum";
    case Primitive::mean: return "mean";
    case Primitive::max: return "max";
    case Primitive::reshape: return "reshape";
    case Primitive::transpose: return "transpose";
    case Primitive::concat: return "concat";
    case Primitive::slice: return "slice";
    case Primitive::softmax: return "softmax";
    case Primitive::layernorm: return "layernorm";
    case Primitive::embedding: return "embedding-lookup";
    case Primitive::depthwise_conv1d: return "depthwise-conv1d";
    case Primitive::l2_normalize: return "l2-normalize";
    case Primitive::cross_entropy: return "cross-entropy";
    case Primitive::gather: return "gather";
    case Primitive::space_to_depth: return "space-to-depth";
    case Primitive::clamp_max: return "clamp-max";
    case Primitive::selective_scan: return "selective-scan";
  }
  return "unknown";
}

}  // namespace mambaclip
