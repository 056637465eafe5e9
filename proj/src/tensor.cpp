#include "valid/tensor.hpp"

#include <Eigen/Dense>
#include <sstream>

namespace valid {

std::string shape_str(const std::vector<int>& s) {
    std::ostringstream ss;
    ss << "(";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) ss << ",";
        ss << s[i];
    }
    ss << ")";
    return ss.str();
}

using MatC = Eigen::Map<const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;
using Mat = Eigen::Map<Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

void gemm(bool trans_a, bool trans_b, int m, int n, int k, double alpha,
          const double* a, const double* b, double beta, double* c) {
    MatC A(a, trans_a ? k : m, trans_a ? m : k);
    MatC B(b, trans_b ? n : k, trans_b ? k : n);
    Mat C(c, m, n);
    if (beta == 0.0)
        C.setZero();
    else if (beta != 1.0)
        C *= beta;
    if (!trans_a && !trans_b)
        C.noalias() += alpha * A * B;
    else if (trans_a && !trans_b)
        C.noalias() += alpha * A.transpose() * B;
    else if (!trans_a && trans_b)
        C.noalias() += alpha * A * B.transpose();
    else
        C.noalias() += alpha * A.transpose() * B.transpose();
}

}  // namespace valid
