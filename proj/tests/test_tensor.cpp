#include <catch2/catch_amalgamated.hpp>

#include <sstream>

#include "yoga/rng.hpp"
#include "yoga/tensor.hpp"

using namespace yoga;

TEST_CASE("shape arithmetic and indexing") {
    Tensor<float> t(Shape{2, 3, 4, 5});
    REQUIRE(t.numel() == 120);
    REQUIRE(t.data.size() == 120);
    t.at(1, 2, 3, 4) = 7.0f;
    REQUIRE(t.data[119] == 7.0f);
    t.at(0, 0, 0, 1) = 3.0f;
    REQUIRE(t.data[1] == 3.0f);
}

TEST_CASE("tensor data length invariant enforced") {
    REQUIRE_THROWS_AS(Tensor<float>(Shape{1, 1, 2, 2}, std::vector<float>{1.f, 2.f}), ShapeError);
}

TEST_CASE("grad slot matches data shape") {
    Tensor<double> t(Shape{1, 2, 2, 2});
    REQUIRE(t.grad.empty());
    t.ensure_grad();
    REQUIRE(t.grad.size() == t.data.size());
    t.grad_at(0, 1, 1, 1) = 5.0;
    t.zero_grad();
    REQUIRE(t.grad_at(0, 1, 1, 1) == 0.0);
}

TEST_CASE("gten binary round trip") {
    Rng rng(7);
    Tensor<float> t(Shape{2, 3, 5, 4});
    rng.fill_uniform(t, -4.0, 4.0);
    std::stringstream ss;
    write_gten(ss, t);
    Tensor<float> back = read_gten<float>(ss);
    REQUIRE(back.shape == t.shape);
    REQUIRE(back.data == t.data);
}

TEST_CASE("gten rejects bad magic and truncation") {
    std::stringstream ss;
    ss << "NOPE";
    REQUIRE_THROWS_AS(read_gten<float>(ss), LoadError);

    Tensor<float> t(Shape{1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    std::stringstream ok;
    write_gten(ok, t);
    std::string full = ok.str();
    std::stringstream cut(full.substr(0, full.size() - 5));
    REQUIRE_THROWS_AS(read_gten<float>(cut), LoadError);
}

TEST_CASE("gten text variant contains all values") {
    Tensor<float> t(Shape{1, 1, 2, 2}, std::vector<float>{1.5f, 2.f, 3.f, 4.f});
    std::stringstream ss;
    write_gten_text(ss, t);
    const std::string s = ss.str();
    REQUIRE(s.find("1.5") != std::string::npos);
    REQUIRE(s.find("4") != std::string::npos);
}

TEST_CASE("rng determinism and ranges") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        REQUIRE(a.uniform() == b.uniform());
        auto v = a.uniform_int(-3, 3);
        REQUIRE(v >= -3);
        REQUIRE(v <= 3);
        (void)b.uniform_int(-3, 3);
    }
    Rng c(1);
    double mean = 0;
    for (int i = 0; i < 10000; ++i) mean += c.normal();
    mean /= 10000;
    REQUIRE(std::abs(mean) < 0.05);
}
