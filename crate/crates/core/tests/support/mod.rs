pub mod gradcheck;
pub mod oracle;
pub mod problems;
