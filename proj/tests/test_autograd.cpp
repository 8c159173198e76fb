#include <catch2/catch_amalgamated.hpp>
#include "fluvgan/ops.hpp"
using namespace fluvgan;

TEST_CASE("sum backward gives ones") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6}, true);
    backward(sum_all(x));
    for (real g : x.grad()) CHECK(g == real(1));
}
