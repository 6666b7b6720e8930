//! Holds the `acceptance` test target, which trains full-size models and
//! prints one line per acceptance criterion. It lives in its own package so
//! that it runs after every other test target of the workspace.
