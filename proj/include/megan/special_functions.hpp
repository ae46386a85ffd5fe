#pragma once

// Gamma-family special functions for strictly positive real arguments.
//
// log_gamma uses a Lanczos approximation (g = 7, 9 terms) with an upward
// shift for small arguments. digamma and trigamma shift the argument above
// a cutoff with their recurrences and then sum the asymptotic Bernoulli
// series. All three throw DomainError for x <= 0.

namespace megan::special {

double log_gamma(double x);
double digamma(double x);
double trigamma(double x);

}  // namespace megan::special
