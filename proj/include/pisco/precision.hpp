#pragma once

// The core library is compiled twice: the default float build used for
// training and inference, and a double build used only for finite-difference
// gradient checks. The inline namespace keeps the two builds link-compatible
// inside one binary.
#if defined(PISCO_DOUBLE)
#define PISCO_ABI f64
#else
#define PISCO_ABI f32
#endif

namespace pisco {
inline namespace PISCO_ABI {

#if defined(PISCO_DOUBLE)
using Scalar = double;
#else
using Scalar = float;
#endif

using TokenId = int;

}  // namespace PISCO_ABI
}  // namespace pisco
