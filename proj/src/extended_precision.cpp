// Extended-precision spectral solves. Kept out of the headers because each
// multiprecision instantiation of the eigensolver is expensive to compile.
#include <boost/multiprecision/eigen.hpp>
#include <boost/multiprecision/mpfr.hpp>

#include "fluidstore/fluidq.hpp"

namespace fluidstore::fluidq::detail {

namespace {

// Fixed-precision backends: the precision is part of the type, so concurrent
// solves never share a mutable precision setting.
template <unsigned Digits10>
using MpReal = boost::multiprecision::number<boost::multiprecision::mpfr_float_backend<Digits10>,
                                             boost::multiprecision::et_off>;

} // namespace

LimitingDistribution solve_extended(const FluidQueueSpec &spec, const SolveOptions &opts) {
    if (opts.mantissa_bits <= 128)
        return solve_reduced<MpReal<39>>(spec, opts, false);
    if (opts.mantissa_bits <= 256)
        return solve_reduced<MpReal<78>>(spec, opts, false);
    return solve_reduced<MpReal<155>>(spec, opts, false);
}

} // namespace fluidstore::fluidq::detail
