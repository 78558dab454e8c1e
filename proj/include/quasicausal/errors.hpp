#pragma once

#include <stdexcept>
#include <string>

namespace quasicausal {

/// Broad failure category; the CLI maps these onto exit codes.
enum class ErrorKind {
  config,      // bad run configuration or DGP parameters
  data,        // schema / validation / I/O problems with input files
  estimation,  // a fit could not be produced
};

class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& what) : std::runtime_error(what), kind_(kind) {}
  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

#define QC_DEFINE_ERROR(Name, Kind, prefix)                                   \
  class Name : public Error {                                                 \
   public:                                                                    \
    explicit Name(const std::string& what) : Error(Kind, prefix + what) {}    \
  };

QC_DEFINE_ERROR(ParameterError, ErrorKind::config, std::string("parameter error: "))
QC_DEFINE_ERROR(ConfigError, ErrorKind::config, std::string("config error: "))
QC_DEFINE_ERROR(SchemaError, ErrorKind::data, std::string("schema error: "))
QC_DEFINE_ERROR(ValidationError, ErrorKind::data, std::string("validation error: "))
QC_DEFINE_ERROR(IoError, ErrorKind::data, std::string("I/O error: "))
QC_DEFINE_ERROR(MissingLagError, ErrorKind::data, std::string("missing-lag error: "))
QC_DEFINE_ERROR(MissingParishError, ErrorKind::data, std::string("missing-parish error: "))
QC_DEFINE_ERROR(NormalizationError, ErrorKind::estimation, std::string("normalization error: "))
QC_DEFINE_ERROR(EstimationError, ErrorKind::estimation, std::string("estimation error: "))
QC_DEFINE_ERROR(ConvergenceError, ErrorKind::estimation, std::string("convergence error: "))
QC_DEFINE_ERROR(SeparationError, ErrorKind::estimation, std::string("separation error: "))
QC_DEFINE_ERROR(IdentificationError, ErrorKind::estimation, std::string("identification error: "))
QC_DEFINE_ERROR(DesignError, ErrorKind::estimation, std::string("design error: "))
QC_DEFINE_ERROR(DomainError, ErrorKind::estimation, std::string("domain error: "))
QC_DEFINE_ERROR(BootstrapInstabilityError, ErrorKind::estimation,
                std::string("bootstrap-instability error: "))

#undef QC_DEFINE_ERROR

}  // namespace quasicausal
